//! Heuristic clustering-driven feature fine-tuning for multiple-instance
//! bag classification.
//!
//! The pipeline trains a gated-attention MIL model over instance embeddings,
//! turns its class-wise confidences into patch pseudo labels, purifies them
//! with two rounds of K-means based cluster classification, mines hard
//! negatives, fine-tunes the instance encoder on the refined `2n - 1` class
//! dataset and repeats.

mod binio;
pub mod abmil;
pub mod confidence;
pub mod config;
pub mod databag;
pub mod error;
pub mod finetune;
pub mod hcluster;
pub mod metrics;
pub mod ndmath;
pub mod optim;
pub mod pipeline;
pub mod refine;
pub mod rng;

pub use error::{Error, Result};
