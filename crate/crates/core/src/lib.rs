//! Training laboratory for sparse categorical CTR models.
//!
//! The crate provides synthetic and CSV datasets ([`datagen`]), an embedding
//! plus ReLU-MLP model with analytic gradients ([`model`]), Adam and Adagrad
//! with interval-adaptive decoupled regularization and their baselines
//! ([`optim`]), evaluation and norm telemetry ([`metrics`]), and a
//! multi-epoch experiment harness ([`harness`]).
//!
//! Data-parallel inner loops go through [`exec`], which uses rayon when the
//! default `parallel` feature is on and runs sequentially otherwise. Both
//! paths produce identical bits.

pub mod datagen;
pub mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;

pub use error::{Error, Result};
pub use exec::Parallelism;
