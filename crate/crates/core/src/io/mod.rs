//! Data ingestion, preprocessing, configuration and output files.

pub mod config;
pub mod matrix;
pub mod plot;
pub mod preprocess;

pub use matrix::{load_matrices, write_matrices, ExpressionMatrix, MatrixFormat};
pub use preprocess::{preprocess, replay, PreprocessOptions, Provenance};
