//! Semi-supervised multimodal domain generalization benchmark harness.
//!
//! Training framework with consensus-gated pseudo-labeling, disagreement
//! regularization via generalized cross-entropy, and cross-modal prototype
//! alignment, evaluated leave-one-domain-out on a synthetic multi-domain
//! multimodal benchmark.

pub mod config;
pub mod datagen;
pub mod diag;
pub mod diffcore;
pub mod gating;
pub mod grid;
pub mod losses;
pub mod model;
pub mod prototypes;
pub mod rng;
pub mod trainer;
