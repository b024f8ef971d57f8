//! Adam in ascent form: parameters move *along* the gradient estimate,
//! since every objective here is a lower bound to be maximized.

use crate::diffcore::{Gradients, ParamStore, SlotId};
use crate::error::{Error, Result};
use crate::harness::config::AdamConfig;

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    /// Update count; bias correction uses `t` after incrementing.
    pub t: u64,
    /// First/second moment estimates, one dense vector per parameter slot.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let shapes: Vec<Vec<f64>> = (0..store.len())
            .map(|i| vec![0.0; store.value(SlotId(i)).len()])
            .collect();
        Adam {
            config,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    /// One ascent step. Slots the gradient never touched still decay their
    /// moments, as in the standard formulation.
    pub fn ascend(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::validation(
                "optimizer state does not match the parameter store",
            ));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for slot in 0..store.len() {
            let id = SlotId(slot);
            let g = grads.slot(id);
            let values = store.value_mut(id).data_mut();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..values.len() {
                let gi = g.map_or(0.0, |t| t.data()[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] += lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
