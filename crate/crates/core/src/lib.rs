//! Representation-level influence functions mediated by a TopK sparse
//! autoencoder.

pub mod attribution;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod influence;
pub mod io;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod sae;
pub mod selftest;
pub mod tensor;

pub use autodiff::{DualTensor, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{ParamVec, Tensor};
