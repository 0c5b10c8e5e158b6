//! Evaluation harness for prompting strategies on medical visual question
//! answering: pathology-explanation prompts (PT2), weak-learner referral
//! prompts (PT3), threshold calibration for the weak learner, answer
//! normalization and precision/recall/F1 + POPE reporting.
//!
//! The VQA model is reached only through [`backend::VqaBackend`].

pub mod backend;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod normalize;
pub mod pipeline;
pub mod prompt;
pub mod records;
pub mod referral;
pub mod report;
