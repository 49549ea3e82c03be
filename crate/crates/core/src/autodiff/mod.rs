//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every op executed through it together with the
//! state its adjoint needs; [`Graph::backward`] then sweeps the record in
//! reverse, visiting each node once. The op set is exactly what the
//! tracking networks use: affine maps, NHWC convolutions, group norm, GRU
//! cells and a handful of elementwise ops and reductions.

mod adam;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use adam::AdamState;
pub use graph::{Bound, Gradients, Graph, GruVars, Var};
pub use params::{hex_digest, read_container, EntryHeader, FileHeader, ParamFileError, ParamSet, FORMAT_VERSION, MAGIC};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
