//! Multidimensional rates of progression from cross-sectional data.
//!
//! A variational autoencoder with a monotone, identifiable decoder, plus
//! identifiability checks, synthetic data, linear baselines and evaluation
//! metrics.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod init;
pub mod iso;
pub mod linalg;
pub mod matching;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
