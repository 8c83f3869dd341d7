//! From-scratch dense-layer networks and their split execution.
//!
//! A [`GlobalModel`] is an ordered list of dense layers. [`split_model`]
//! partitions it into [`SubModel`]s that chain activations forward and
//! gradients backward; run unsplit and split with the same seed, the
//! arithmetic is performed in the same order and yields identical bits.
//!
//! Kernels accumulate in the element type: reductions run over the input
//! index in ascending order, bias first. Anything comparing against these
//! kernels at the bit level must follow the same order.

mod checkpoint;
mod data;
mod layer;
mod loss;
mod model;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use data::{load_dataset, save_dataset, BlobSpec, Dataset, DATASET_MAGIC};
pub use layer::{Activation, Layer};
pub use loss::loss_and_grad;
pub use model::{split_model, GlobalModel, ParamGrads, SubModel};
pub use optim::{lr_schedule, sgd_step, OptimizerState, TrainConfig};
pub use tensor::Tensor;

use thiserror::Error;

/// Element type of tensors and parameters. Implemented for `f32` (wire
/// precision) and `f64` (oracle precision).
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;

    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn ln(self) -> f32 {
        f32::ln(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;

    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// Element type tag as carried in wire frames and files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_u8(v: u8) -> Option<Dtype> {
        match v {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("bad cut points {cuts:?} for {layers} layers")]
    BadCuts { cuts: Vec<usize>, layers: usize },
    #[error("sub-model count {k} outside 2..={layers}")]
    BadSubModelCount { k: usize, layers: usize },
    #[error("label {label} outside {classes} classes")]
    BadLabel { label: u32, classes: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("checkpoint malformed: {reason}")]
    BadCheckpoint { reason: String },
    #[error("dataset malformed: {reason}")]
    BadDataset { reason: String },
}
