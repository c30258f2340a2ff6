//! Named parameter storage plus per-forward tape binding. Parameters live as
//! plain tensors between steps; a [`Forward`] context binds each one to a
//! fresh tape on first use (trainable params as watched leaves, frozen ones
//! as constants, inference entirely off-tape) and caches the binding so
//! shared weights map to a single tape node.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::tensor::tape::{Gradients, Tape};
use crate::tensor::{DType, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct Slot {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

pub struct ParamStore {
    slots: Vec<Slot>,
    by_name: HashMap<String, usize>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> ParamStore {
        ParamStore {
            slots: Vec::new(),
            by_name: HashMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        data: Vec<f64>,
        shape: &[usize],
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Invalid(format!(
                "parameter {name} registered twice"
            )));
        }
        let value = Tensor::new(data, shape, self.dtype)?;
        let id = self.slots.len();
        self.by_name.insert(name.clone(), id);
        self.slots.push(Slot {
            name,
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if value.shape() != slot.value.shape() {
            return Err(TensorError::Shape(format!(
                "parameter {} has shape {:?}, not {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value.to_dtype(self.dtype);
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.slots[id.0].trainable = trainable;
    }

    /// Flips the trainable flag on every parameter whose name starts with
    /// `prefix`; returns how many were touched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut count = 0;
        for slot in &mut self.slots {
            if slot.name.starts_with(prefix) {
                slot.trainable = trainable;
                count += 1;
            }
        }
        count
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Slots in registration order (the canonical parameter order).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Slot)> {
        self.slots.iter().enumerate().map(|(i, s)| (ParamId(i), s))
    }

    pub fn num_trainable(&self) -> usize {
        self.slots.iter().filter(|s| s.trainable).count()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Trainable parameters are watched on the tape.
    Train,
    /// Everything binds as constants; no tape records.
    Inference,
}

/// One forward pass worth of parameter bindings.
pub struct Forward<'a> {
    store: &'a ParamStore,
    tape: Tape,
    mode: Mode,
    bound: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Forward<'a> {
        Forward {
            store,
            tape: Tape::new(),
            mode,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// The parameter bound for this pass (cached, so repeated use of a shared
    /// weight keeps one tape node and accumulates gradients correctly).
    pub fn param(&self, id: ParamId) -> Tensor {
        let mut bound = self.bound.borrow_mut();
        if let Some(t) = &bound[id.0] {
            return t.clone();
        }
        let slot = &self.store.slots[id.0];
        let t = match self.mode {
            Mode::Train if slot.trainable => self.tape.watch(&slot.value),
            _ => slot.value.clone(),
        };
        bound[id.0] = Some(t.clone());
        t
    }

    /// Watches an input tensor (for gradients w.r.t. data, e.g. flow query
    /// positions in tests).
    pub fn watch_input(&self, t: &Tensor) -> Tensor {
        self.tape.watch(t)
    }

    /// Substitutes `value` for a parameter in this pass only. Finite-
    /// difference tests use this to vary one parameter as if it were an
    /// input; `value` must match the slot's shape.
    pub fn bind_override(&self, id: ParamId, value: Tensor) {
        debug_assert_eq!(value.shape(), self.store.slots[id.0].value.shape());
        self.bound.borrow_mut()[id.0] = Some(value);
    }

    /// Gradients per slot index, in registration order.
    pub fn slot_grads(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        let bound = self.bound.borrow();
        (0..self.store.len())
            .map(|i| {
                bound[i]
                    .as_ref()
                    .and_then(|t| grads.wrt(t))
                    .map(|g| g.to_vec())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::backward;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new(DType::F64);
        store.register("w", vec![1.0], &[1], true).unwrap();
        assert!(store.register("w", vec![2.0], &[1], true).is_err());
    }

    #[test]
    fn shared_binding_accumulates_grads() {
        let mut store = ParamStore::new(DType::F64);
        let id = store.register("w", vec![3.0], &[1], true).unwrap();
        let fw = Forward::new(&store, Mode::Train);
        let w1 = fw.param(id);
        let w2 = fw.param(id);
        // loss = w * w -> dloss/dw = 2w = 6
        let loss = w1.mul(&w2).unwrap().sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        let per_slot = fw.slot_grads(&grads);
        assert_eq!(per_slot[0].as_deref().unwrap(), &[6.0]);
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut store = ParamStore::new(DType::F64);
        let id = store.register("w", vec![3.0], &[1], false).unwrap();
        let fw = Forward::new(&store, Mode::Train);
        let w = fw.param(id);
        assert!(!w.requires_grad());
        assert!(fw.tape().is_empty());
    }

    #[test]
    fn inference_records_nothing() {
        let mut store = ParamStore::new(DType::F64);
        let id = store.register("w", vec![2.0], &[1], true).unwrap();
        let fw = Forward::new(&store, Mode::Inference);
        let w = fw.param(id);
        let y = w.mul(&w).unwrap();
        assert!(!y.requires_grad());
        assert!(fw.tape().is_empty());
    }
}
