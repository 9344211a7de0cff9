//! Variational transformer dialogue models on a from-scratch tensor engine.
//!
//! The crate implements three model variants over a shared encoder/decoder
//! stack: a deterministic baseline transformer trained with teacher-forced
//! maximum likelihood, a global variational transformer (GVT) that injects a
//! single Gaussian latent into the start-of-sequence embedding, and a
//! sequential variational transformer (SVT) whose first decoder layer
//! produces one latent per position through paired prior/posterior paths
//! that share attention weights and differ only in the self-attention mask.
//!
//! Everything trains through [`tensor`], a small reverse-mode autodiff tape,
//! so gradients are checkable against central finite differences end to end.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod variational;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
