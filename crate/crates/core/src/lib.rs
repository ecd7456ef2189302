//! Dynamic embedding and tokenization for irregular, multimodal clinical
//! time series.
//!
//! The pipeline: encounter records ([`data`]) are tokenized with non-unique
//! timestamp-rank positions ([`tokenizer`]), embedded with per-variable value
//! encoders, Time2Vec and a positional table ([`embedding`]), encoded by a
//! sliding-window transformer with one global token per outcome
//! ([`attention`]) or a GRU baseline ([`gru`]), optionally fused with
//! clinical-note embeddings ([`fusion`]), and trained with weighted
//! multitask cross-entropy ([`train`]).

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod model;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

/// Number of predicted outcomes (one global token and one head each).
pub const N_TASKS: usize = 9;

/// Short names of the predicted outcomes, in label order.
pub const TASK_NAMES: [&str; N_TASKS] = [
    "ICU",
    "AKI",
    "MV",
    "Mortality",
    "Wound",
    "Neurological",
    "Sepsis",
    "Cardiovascular",
    "VTE",
];
