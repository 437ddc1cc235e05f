//! Receptor-conditioned molecular property prediction.
//!
//! Ligand per-atom features are refined by a target-conditioned
//! self-attention block (global semantics pooled from the whole receptor)
//! followed by residual cross-attention layers over binding-pocket residues.
//! The crate covers the differentiable primitives, the model, the on-disk
//! formats, training with evaluation metrics, and gradient auditing.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod ops;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use matrix::{FeatureMatrix, Scalar};
pub use tape::{Gradients, Tape, Var};
