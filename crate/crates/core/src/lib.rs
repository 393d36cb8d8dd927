//! Endemic-epidemic count modelling of regional case surveillance data:
//! panel assembly, mobility features, social-distance embedding, penalized
//! negative-binomial estimation with REML smoothing selection, delay
//! imputation, pooling and diagnostics, plus a generative simulator.

pub mod basis;
pub mod config;
pub mod diagnostics;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod features;
pub mod imputation;
pub mod linalg;
pub mod panel;
pub mod pipeline;
pub mod pooling;
pub mod simulator;
pub mod special;
pub mod svg;

pub use error::{Error, Result};
