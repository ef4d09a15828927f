//! Vulnerability-fix commit detection from code deltas.
//!
//! The pipeline runs repository mining → contextual change building →
//! byte-level BPE tokenization → transformer encoding → delta fusion and
//! classification → commit-level aggregation → evaluation.

pub mod change_builder;
pub mod delta_model;
pub mod encoder;
pub mod optim;
mod par;
pub mod repo_miner;
pub mod tensor;
pub mod tokenizer;
pub mod evaluation;
pub mod inference;
pub mod synthetic;
pub mod trainer;
