//! Latent-variable non-autoregressive translation on a deterministic
//! CPU autodiff tape.
//!
//! The crate trains an autoregressive Transformer teacher, distills it
//! into a continuous latent-variable non-autoregressive model, and
//! refines translations with deterministic delta-posterior iteration
//! and prior-based latent search.

pub mod chart;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod inference;
pub mod layers;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod teacher;

pub use error::{LanmtError, Result};
