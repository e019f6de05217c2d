//! Named parameter and buffer storage shared by the network modules.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

static NEXT_STORE_KEY: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Optimized by gradient descent.
    Param,
    /// Running statistics; updated in place during training forward passes.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub kind: EntryKind,
    pub value: Tensor<T>,
}

/// Ordered collection of named tensors belonging to one network.
#[derive(Debug)]
pub struct ParamStore<T> {
    key: u64,
    entries: Vec<Entry<T>>,
}

impl<T: Element> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            key: NEXT_STORE_KEY.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
        }
    }
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            key: NEXT_STORE_KEY.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn add(&mut self, name: impl Into<String>, kind: EntryKind, value: Tensor<T>) -> usize {
        self.entries.push(Entry {
            name: name.into(),
            kind,
            value,
        });
        self.entries.len() - 1
    }

    /// Zero-mean Gaussian initialization.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> usize {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        self.add(name, EntryKind::Param, Tensor::from_vec(shape, data).expect("shape"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, kind: EntryKind, shape: &[usize], v: f64) -> usize {
        self.add(name, kind, Tensor::full(shape, T::lit(v)))
    }

    pub fn value(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].value
    }

    pub fn kind(&self, index: usize) -> EntryKind {
        self.entries[index].kind
    }

    pub fn param_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EntryKind::Param)
            .map(|(i, _)| i)
    }

    pub fn num_parameters(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Order-sensitive FNV-1a digest over every parameter and buffer bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in &self.entries {
            for b in T::to_le_bytes_vec(e.value.data()) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Digest over parameters only (buffers excluded).
    pub fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in self.entries.iter().filter(|e| e.kind == EntryKind::Param) {
            for b in T::to_le_bytes_vec(e.value.data()) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn param_sq_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.value.sq_norm().to_f64().unwrap())
            .sum()
    }

    /// Replaces all values from `other`, which must have identical layout.
    pub fn load_from(&mut self, other: &[Entry<T>]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(other) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Format(format!(
                    "tensor mismatch: {} {:?} vs {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}
