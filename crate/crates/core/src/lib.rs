//! Prediction of learner interaction peaks in educational videos from
//! precomputed segment embeddings, with concept-activation-vector
//! explanations in terms of multimedia-learning rubric features.
//!
//! The crate is organized as the pipeline runs:
//!
//! - [`events`]: event-log ingestion, seek classification, video dedup.
//! - [`signals`]: per-second behavioral signals, percentile ranks, top-K labels.
//! - [`embedstore`]: embedding manifests and input assembly.
//! - [`model`]: the classification head, its gradients and training.
//! - [`eval`]: AUC, Lift@K%, course-grouped and field-holdout splits, experiments.
//! - [`tcav`]: concept activation vectors and TCAV significance testing.
//! - [`ctml`]: rubric records, inter-rater agreement, association summaries.
//! - [`synth`]: a seeded synthetic corpus with planted ground truth.

pub mod ctml;
pub mod embedstore;
pub mod eval;
pub mod events;
pub mod model;
pub mod rng;
pub mod signals;
pub mod stats;
pub mod synth;
pub mod tcav;
