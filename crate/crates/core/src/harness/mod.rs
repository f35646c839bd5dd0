//! Synthetic data, training pipeline, metrics and the acceptance suite.

pub mod acceptance;
pub mod config;
pub mod data;
pub mod metrics;
pub mod pipeline;
pub mod switch;

pub use config::HarnessConfig;
pub use data::{generate_dataset, write_samples_csv, Dataset, SyntheticSample};
pub use pipeline::{train_all, Trained};
