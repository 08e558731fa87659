//! Intrinsic image decomposition toolkit.
//!
//! Splits an image `I` into albedo `A` and shading `S` with `I = A × S` using a
//! two-stream encoder–decoder whose encoders are pushed apart in feature space,
//! and ships the loss and metric suites plus a dataset refinement pipeline that
//! makes rendered triplets satisfy the product model exactly.

pub mod dataset;
pub mod imageio;
pub mod judgements;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod refine;
pub mod synth;
pub mod tensor;
pub mod train;

mod error;

pub use error::{Error, Result};
