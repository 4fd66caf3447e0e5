//! Desk-scale spatially decoupled DETR (SD-DETR).
//!
//! The crate is organized around a small reverse-mode autodiff core
//! ([`graph::Graph`] over [`tensor::Tensor`]) on which the detector is built:
//! a transformer encoder, a decoder whose cross-attention is split into
//! classification and localization branches, task-aware query generation from
//! mini-detector anchors, and a task-alignment classification loss. Around the
//! model sit a synthetic shapes dataset, Hungarian matching, a COCO-style AP
//! evaluator, attention-map export, and a training/ablation harness.

pub mod attention;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod loss;
pub mod matching;
pub mod model;
pub mod params;
pub mod querygen;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::{Scalar, Tensor};
