//! Paired condition/target samples and batching.

use serde::{Deserialize, Serialize};

use crate::error::{CvdmError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SampleMeta {
    /// Noise level used for the measurement, when the sample is synthetic.
    pub xi: Option<f64>,
    pub source_id: String,
}

/// A condition `x: [C_x, H, W]` with its target `y: [C_y, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub x: Tensor,
    pub y: Tensor,
    pub meta: SampleMeta,
}

impl PairedSample {
    pub fn new(x: Tensor, y: Tensor, meta: SampleMeta) -> Result<Self> {
        if x.rank() != 3 || y.rank() != 3 || x.shape()[1..] != y.shape()[1..] {
            return Err(CvdmError::Shape(format!(
                "condition {:?} and target {:?} must be [C, H, W] with equal H, W",
                x.shape(),
                y.shape()
            )));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(CvdmError::NonFinite(format!("sample {}", meta.source_id)));
        }
        Ok(Self { x, y, meta })
    }
}

/// Stacks the selected samples into `([B, C_x, H, W], [B, C_y, H, W])`.
pub fn stack_batch(samples: &[PairedSample], indices: &[usize]) -> Result<(Tensor, Tensor)> {
    if indices.is_empty() {
        return Err(CvdmError::Config("empty batch".into()));
    }
    let xs: Vec<&Tensor> = indices.iter().map(|&i| &samples[i].x).collect();
    let ys: Vec<&Tensor> = indices.iter().map(|&i| &samples[i].y).collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}
