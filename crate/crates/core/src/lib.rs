//! Learning and verifying invariance-adapted latent decompositions.
//!
//! The crate generates synthetic worlds with block-structured augmentations, trains linear
//! or small MLP encoders with sparse (L1 / group-lasso) alignment objectives, and scores the
//! learned representations with exact combinatorial oracles.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::should_implement_trait)]

pub mod analyze;
pub mod error;
pub mod experiment;
pub mod frequency;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use frequency::{CoordSet, FrequencyDecomposition};
pub use model::EncoderModel;
pub use numerics::{Mat, RngStream};
