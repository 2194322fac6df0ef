//! Forward neural architecture search by gradient boosting on
//! intermediate layers.
//!
//! Small computation graphs grow into larger ones: at every growth step
//! the engine attaches a joint weak learner (the union of all eligible
//! shortcut connections) to each boosted layer, trains it under weight
//! sharing with an L1 selection penalty, finalizes the strongest shortcuts
//! into the model behind a zero-initialized gate, and records the result
//! on a cost/error lower convex hull from which parents are sampled for
//! further growth.
//!
//! The crate is organized around the pipeline:
//!
//! - [`graph`], [`ops`], [`autodiff`], [`optim`]: an explicit-graph f64
//!   engine with reverse-mode differentiation, including the
//!   stop-gradient / stop-forward pair that decouples candidate training
//!   from the parent model.
//! - [`weaklearn`]: candidate construction and selection.
//! - [`growth`]: seed models, finalization, cell tying, genotypes.
//! - [`search`]: the outer loop, convex hull and parent sampling.
//! - [`fslr`]: forward stage-wise linear regression, the feature-selection
//!   degenerate case used as an equivalence oracle.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod construct;
pub mod cost;
pub mod data;
pub mod error;
pub mod fslr;
pub mod genotype;
pub mod graph;
pub mod growth;
pub mod ops;
pub mod optim;
pub mod params;
pub mod search;
pub mod tensor;
pub mod weaklearn;

pub use error::{CoreError, Result};
