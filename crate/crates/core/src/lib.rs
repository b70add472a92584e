//! Block-wise dynamic sparseness for neural network layers.
//!
//! Weight matrices are partitioned into a grid of blocks; a small gating
//! network picks, per input, the top-k blocks to compute and rescales them so
//! the mask has mean one. The remaining blocks are skipped entirely, and every
//! product is accounted in a multiply-add ledger.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod gating;
pub mod io;
mod kernels;
pub mod models;
pub mod params;
pub mod pruning;
pub mod sparse_linear;
pub mod tensor;
pub mod testing;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, ParseError, Result};
pub use gating::{GateMask, GatingNetwork, SparsenessConfig};
pub use params::{Graph, ParamGrads, ParamId, ParamStore, SeededRng, Session};
pub use sparse_linear::{
    comput_fraction, gated_matvec, BlockGeometry, BlockMatrix, ComputeLedger, DynamicLinear,
};
pub use tensor::Tensor;
