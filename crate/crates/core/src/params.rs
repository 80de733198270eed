//! Named parameter storage shared by the schedule networks and the denoiser.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CvdmError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-style normal initialisation with the given fan-in.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// All parameters concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Replaces every tensor, checking names and shapes against `self`.
    pub fn load_from(&mut self, names: &[String], values: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() || values.len() != self.values.len() {
            return Err(CvdmError::Checkpoint(
                "parameter layout differs from the model configuration".into(),
            ));
        }
        for (dst, src) in self.values.iter_mut().zip(values) {
            if dst.shape() != src.shape() {
                return Err(CvdmError::Checkpoint(format!(
                    "parameter shape {:?} vs stored {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src;
        }
        Ok(())
    }
}
