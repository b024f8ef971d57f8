//! Finite-difference verification of tape gradients.
//!
//! Each parameter coordinate is perturbed by ±h and the central difference is
//! compared against the analytic gradient. Coordinates whose analytic and
//! numeric magnitudes are both below [`SMALL_GRAD`] carry mostly roundoff
//! noise, so they are held to an absolute bound instead of a relative one.

use crate::diffcore::params::{Gradients, ParamStore, SlotId};

/// Magnitude below which a coordinate is judged by absolute error.
pub const SMALL_GRAD: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// Coordinates compared with a relative criterion.
    pub checked: usize,
    /// Coordinates compared with the absolute criterion.
    pub small: usize,
    pub max_rel: f64,
    pub max_abs_small: f64,
    pub worst_slot: String,
    pub worst_index: usize,
}

impl FiniteDiffReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel < rel_tol && self.max_abs_small < 1e-6
    }
}

/// Compares `grads` against central differences of `f` with step `h`.
///
/// `f` must be a pure function of the store's values; the store is restored
/// exactly after every probe (the perturbed coordinate is reassigned, not
/// accumulated).
pub fn finite_difference<F>(
    store: &mut ParamStore,
    grads: &Gradients,
    h: f64,
    mut f: F,
) -> FiniteDiffReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut report = FiniteDiffReport {
        checked: 0,
        small: 0,
        max_rel: 0.0,
        max_abs_small: 0.0,
        worst_slot: String::new(),
        worst_index: 0,
    };
    for slot in 0..store.len() {
        let id = SlotId(slot);
        let len = store.value(id).len();
        for i in 0..len {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + h;
            let up = f(store);
            store.value_mut(id).data_mut()[i] = original - h;
            let down = f(store);
            store.value_mut(id).data_mut()[i] = original;

            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.slot(id).map_or(0.0, |t| t.data()[i]);
            let diff = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            if scale < SMALL_GRAD {
                report.small += 1;
                if diff > report.max_abs_small {
                    report.max_abs_small = diff;
                }
            } else {
                report.checked += 1;
                let rel = diff / scale;
                if rel > report.max_rel {
                    report.max_rel = rel;
                    report.worst_slot = store.name(id).to_string();
                    report.worst_index = i;
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tape::Tape;
    use crate::diffcore::tensor::Tensor;

    #[test]
    fn quadratic_gradient_checks_out() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w", Tensor::vector(vec![0.7, -1.3, 2.1]))
            .unwrap();
        let build = |s: &ParamStore| {
            let mut tape = Tape::new(s);
            let wn = tape.param(w);
            let sq = tape.mul(wn, wn);
            let parts: Vec<_> = (0..3).map(|i| tape.pick(sq, i)).collect();
            let total = tape.sum(&parts);
            tape.scalar(total)
        };
        let grads = {
            let mut tape = Tape::new(&store);
            let wn = tape.param(w);
            let sq = tape.mul(wn, wn);
            let parts: Vec<_> = (0..3).map(|i| tape.pick(sq, i)).collect();
            let total = tape.sum(&parts);
            tape.backward(total)
        };
        let report = finite_difference(&mut store, &grads, 1e-5, build);
        assert!(report.passes(1e-4), "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::vector(vec![1.0])).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        grads.slot_or_insert(w, &[1]).data_mut()[0] = 3.0; // true gradient is 2.0
        let report = finite_difference(&mut store, &grads, 1e-5, |s| {
            let v = s.value(w).data()[0];
            v * v
        });
        assert!(!report.passes(1e-4));
    }
}
