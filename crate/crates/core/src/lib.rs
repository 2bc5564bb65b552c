//! Core of the cascade test-time-training pipeline.
//!
//! Everything here is allocation-only (`no_std` + `alloc`): the autodiff
//! tensor engine, cascade data structures and synthetic generation, the user
//! encoders, the sequence backbone with per-cascade FiLM adaptation, the BYOL
//! auxiliary task, prediction heads, the three training phases and the
//! evaluation metrics. File formats, checkpoints and the CLI live in the
//! `difftt` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod module;
pub mod optim;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use module::{Linear, Module, VarTree};
pub use sparse::Csr;
pub use tensor::Tensor;
