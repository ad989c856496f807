//! Named parameter storage and the forward-pass context.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::tape::{Tape, Var};
use crate::error::{bail, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Weight,
    /// State carried alongside weights (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    dims: Vec<usize>,
    value: Matrix<T>,
    kind: ParamKind,
    trainable: bool,
}

/// Named tensor as stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

/// Every parameter and buffer of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Registers a tensor. `dims` is the logical shape; the matrix is its
    /// row-major storage and must hold the same number of elements.
    pub fn register(&mut self, name: &str, dims: &[usize], value: Matrix<T>, kind: ParamKind) -> Result<ParamId> {
        if self.find(name).is_some() {
            bail!(Config, "parameter {name} registered twice");
        }
        let count: usize = dims.iter().product();
        if count != value.as_slice().len() {
            bail!(Shape, "parameter {name}: dims {:?} do not match {} values", dims, value.as_slice().len());
        }
        self.entries.push(Entry {
            name: name.to_string(),
            dims: dims.to_vec(),
            value,
            kind,
            trainable: kind == ParamKind::Weight,
        });
        Ok(ParamId(self.entries.len() as u32 - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(|i| ParamId(i as u32))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.index()].name
    }

    pub fn dims(&self, id: ParamId) -> &[usize] {
        &self.entries[id.index()].dims
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.index()].kind
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.entries[id.index()].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.entries[id.index()].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.index()].trainable
    }

    /// Freezes or unfreezes a weight. Buffers are never trainable.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let e = &mut self.entries[id.index()];
        e.trainable = trainable && e.kind == ParamKind::Weight;
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.as_slice().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    dims: e.dims.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                dims: e.dims.iter().map(|&d| d as u32).collect(),
                data: e.value.as_slice().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }

    /// Overwrites every registered tensor from `tensors`. Names and shapes
    /// must match exactly; extra or missing tensors are errors.
    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            bail!(Config, "checkpoint holds {} tensors, model expects {}", tensors.len(), self.entries.len());
        }
        for t in tensors {
            let Some(id) = self.find(&t.name) else {
                bail!(Config, "checkpoint tensor {} is unknown to the model", t.name);
            };
            let e = &self.entries[id.index()];
            if t.dims.len() != e.dims.len() || t.dims.iter().zip(&e.dims).any(|(&a, &b)| a as usize != b) {
                bail!(Shape, "checkpoint tensor {} has dims {:?}, model expects {:?}", t.name, t.dims, e.dims);
            }
        }
        for t in tensors {
            let id = self.find(&t.name).expect("checked above");
            let e = &mut self.entries[id.index()];
            for (d, &v) in e.value.as_mut_slice().iter_mut().zip(&t.data) {
                *d = T::from_f64(v as f64);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State threaded through one forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
    leaves: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        let n = store.len();
        Self { tape: Tape::new(), store, mode, leaves: alloc::vec![None; n] }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Tape leaf for a parameter, created on first use. Frozen parameters
    /// enter the tape as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if self.leaves.len() < self.store.len() {
            self.leaves.resize(self.store.len(), None);
        }
        if let Some(v) = self.leaves[id.index()] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.store.is_trainable(id) {
            self.tape.param(id, value)
        } else {
            self.tape.input(value, false)
        };
        self.leaves[id.index()] = Some(v);
        v
    }

    /// Drops cached leaves; call after `backward` when reusing the context.
    pub fn reset(&mut self) {
        self.tape = Tape::new();
        self.leaves.iter_mut().for_each(|l| *l = None);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_find() {
        let mut s = ParamStore::<f32>::new();
        let a = s.register("a", &[2, 3], Matrix::zeros(2, 3), ParamKind::Weight).unwrap();
        let b = s.register("b", &[3], Matrix::zeros(1, 3), ParamKind::Buffer).unwrap();
        assert_eq!(s.find("b"), Some(b));
        assert!(s.is_trainable(a));
        assert!(!s.is_trainable(b));
        assert!(s.register("a", &[1], Matrix::zeros(1, 1), ParamKind::Weight).is_err());
        assert!(s.register("c", &[4], Matrix::zeros(1, 3), ParamKind::Weight).is_err());
        assert_eq!(s.trainable_count(), 6);
    }

    #[test]
    fn named_round_trip() {
        let mut s = ParamStore::<f32>::new();
        s.register("w", &[2], Matrix::from_vec(1, 2, alloc::vec![1.5, -2.0]).unwrap(), ParamKind::Weight).unwrap();
        let named = s.to_named();
        let mut t = ParamStore::<f32>::new();
        t.register("w", &[2], Matrix::zeros(1, 2), ParamKind::Weight).unwrap();
        t.load_named(&named).unwrap();
        assert_eq!(t.value(ParamId(0)).as_slice(), &[1.5, -2.0]);
        let mut bad = named.clone();
        bad[0].dims = alloc::vec![3];
        assert!(t.load_named(&bad).is_err());
    }
}
