//! Within-image co-saliency detection: finds the groups of objects that
//! repeat inside a single image and segments them, suppressing salient but
//! unrepeated distractors.
//!
//! The crate is organised around a small hand-rolled differentiable core
//! ([`diffcore`]) on which a micro U-Net backbone with a region-proposal
//! head and a region-feature embedding head is built ([`network`]). Box
//! arithmetic lives in [`geometry`], region pooling in [`roialign`], the
//! three training losses in [`losses`], triplet mining in [`sampling`],
//! evaluation in [`metrics`], and dataset handling (synthetic generation,
//! augmentation, disk I/O) in [`data`]. [`run`] ties it together into
//! reproducible train / predict / evaluate entry points used by the CLI.
//!
//! All numeric code is generic over the scalar type via the [`scalar::Real`]
//! trait; training runs in f32, verification suites in f64.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod roialign;
pub mod run;
pub mod sampling;
pub mod scalar;
pub mod tensor;

pub use error::{CosalError, Result};
pub use scalar::Real;
pub use tensor::Tensor;

/// Concrete aliases for the two supported scalar widths.
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
