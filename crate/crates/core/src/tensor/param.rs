use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::Tensor;
use crate::error::{HdtError, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to one parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Named, ordered collection of trainable tensors owned by one model.
///
/// Each store carries a process-unique id so a tape can route gradients of
/// bound parameters back to the right store.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    prefix: String,
    params: Vec<Parameter>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            prefix: self.prefix.clone(),
            params: self.params.clone(),
        }
    }
}

impl ParamStore {
    pub fn new(prefix: impl Into<String>) -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            prefix: prefix.into(),
            params: Vec::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Registers a parameter under `<prefix>.<name>`.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        assert!(
            self.params.iter().all(|p| p.name != full),
            "duplicate parameter name {full}"
        );
        self.params.push(Parameter { name: full, value });
        ParamId(self.params.len() - 1)
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) initialization.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies values from `(name, tensor)` pairs, requiring every parameter
    /// to be present with a matching shape.
    pub fn load_from<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor>,
    ) -> Result<()> {
        for p in &mut self.params {
            let t = lookup(&p.name)
                .ok_or_else(|| HdtError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(HdtError::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// True if every value is bit-identical to `other`'s.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
