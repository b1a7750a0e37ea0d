//! Causal prototype contrast adaptation for semantic segmentation.
//!
//! The crate implements a desk-scale unsupervised domain adaptation
//! pipeline: a dual-encoder model disentangling causal (shape/texture) from
//! bias (style) features, prototype-based contrastive alignment with EMA
//! updates, counterfactual bias-swap training, confidence-ranked
//! self-training, and confusion-matrix evaluation — plus a synthetic
//! paired-domain dataset generator where the causal/bias split is known by
//! construction.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod intervention;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod proto;
pub mod rng;
pub mod self_training;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use labels::{LabelBatch, LabelMap, IGNORE};
pub use tensor::Tensor;
