//! Two-stage prompt-then-finetune adaptation of a small dual encoder for
//! text-to-image person retrieval, with a synthetic benchmark domain.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod objectives;
pub mod patch;
pub mod plot;
pub mod prompt;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use config::{ExperimentConfig, Strategy};
pub use error::{Error, Result};
