//! Named parameter storage with matching gradient slots.
//!
//! Slots keep their insertion order; every loop over slots (gradient
//! accumulation, optimizer updates, checkpoint serialization) walks them in
//! that fixed order so floating-point reductions are reproducible.

use std::collections::HashMap;

use crate::diffcore::rng::Prng;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter slot inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<SlotId> {
        if self.index.contains_key(name) {
            return Err(Error::validation(format!("duplicate parameter slot {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        Ok(SlotId(id))
    }

    /// Uniformly initialized tensor in `[-scale, scale]`.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        scale: f64,
        rng: &mut Prng,
    ) -> Result<SlotId> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.uniform_in(-scale, scale)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Result<SlotId> {
        self.index
            .get(name)
            .map(|&i| SlotId(i))
            .ok_or_else(|| Error::validation(format!("unknown parameter slot {name}")))
    }

    pub fn name(&self, id: SlotId) -> &str {
        &self.names[id.0]
    }

    /// Slot names in insertion order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: SlotId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: SlotId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn value_by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.slot(name)?))
    }

    pub fn grad(&self, id: SlotId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.grad(self.slot(name)?))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Adds `grads` into the store's gradient slots, walking slots in order.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (slot, add) in grads.slots.iter().enumerate() {
            if let Some(add) = add {
                let dst = self.grads[slot].data_mut();
                for (d, a) in dst.iter_mut().zip(add.data()) {
                    *d += a;
                }
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (name, t) in self.names.iter().zip(&self.values) {
            t.validate_finite(name)?;
        }
        Ok(())
    }
}

/// Per-slot gradients produced by one backward pass.
///
/// Slots never touched by the graph stay `None`; arithmetic treats them
/// as zero.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            slots: vec![None; store.len()],
        }
    }

    pub fn slot(&self, id: SlotId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    pub(crate) fn slot_or_insert(&mut self, id: SlotId, shape: &[usize]) -> &mut Tensor {
        self.slots[id.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
    }

    /// Gradient for a slot, materializing zeros for untouched slots.
    pub fn dense(&self, store: &ParamStore, id: SlotId) -> Tensor {
        match &self.slots[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(store.value(id).shape().to_vec()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => {
                    for (dv, sv) in d.data_mut().iter_mut().zip(s.data()) {
                        *dv += sv;
                    }
                }
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for slot in self.slots.iter_mut().flatten() {
            for v in slot.data_mut() {
                *v *= k;
            }
        }
    }

    /// Euclidean norm over all slots, in slot order.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for slot in self.slots.iter().flatten() {
            for v in slot.data() {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Flattens to one vector ordered by slot, then row-major within slots.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_params());
        for i in 0..store.len() {
            match &self.slots[i] {
                Some(t) => out.extend_from_slice(t.data()),
                None => out.extend(std::iter::repeat(0.0).take(store.value(SlotId(i)).len())),
            }
        }
        out
    }
}
