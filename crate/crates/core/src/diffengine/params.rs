use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which entries a count or update applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrozenFilter {
    All,
    Trainable,
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    pub rng_seed: u64,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name} not bound"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Copy with one handle replaced, e.g. by an externally created leaf.
    pub fn with_override(&self, name: &str, var: Var) -> BoundParams {
        let mut out = self.clone();
        let i = self.index[name];
        out.vars[i] = var;
        out
    }
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            rng_seed,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            frozen: false,
        });
        Ok(())
    }

    /// Inserts a tensor filled from `U(-bound, bound)`.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Errors unless `other` holds the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter records, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {} {:?}, found {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.index.get(name).map(|&i| self.entries[i].frozen).unwrap_or(false)
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.frozen = true;
        }
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if self.entries[i].frozen && !frozen {
            return Err(Error::Contract(format!("parameter {name} is frozen; unfreezing is not supported")));
        }
        self.entries[i].frozen = frozen;
        Ok(())
    }

    /// Exact count of scalars selected by `filter`.
    pub fn count(&self, filter: FrozenFilter) -> usize {
        self.entries
            .iter()
            .filter(|e| match filter {
                FrozenFilter::All => true,
                FrozenFilter::Trainable => !e.frozen,
                FrozenFilter::Frozen => e.frozen,
            })
            .map(|e| e.value.numel())
            .sum()
    }

    /// Registers every entry as a tape leaf; frozen entries do not require grad.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), !e.frozen))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Like [`bind`](Self::bind) but every entry requires grad regardless of the
    /// frozen flag. Gradients obtained this way are still never applied to frozen entries.
    pub fn bind_all_grad(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), true))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Rounds every value to the nearest `f32`, so the checkpoint blob is lossless.
    pub fn snap_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Little-endian `f32` blob in store order.
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.count(FrozenFilter::All) * 4);
        for e in &self.entries {
            for &v in e.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and the exact `f64` bit patterns, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([0u8]);
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
