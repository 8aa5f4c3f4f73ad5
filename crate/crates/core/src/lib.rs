//! Variational mixtures of gene-expression ODEs.
//!
//! Jointly infers per-cell latent time, latent cell state and per-gene
//! transcription / splicing / degradation rates from paired unspliced and
//! spliced expression matrices. Includes the closed-form kinetics, baseline
//! estimators, a small neural-network core, the two variational models, a
//! ground-truth simulator, evaluation metrics and file I/O.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod io;
pub mod kinetics;
pub mod models;
pub mod nn;
pub mod simulator;

pub use error::{Error, Result};
