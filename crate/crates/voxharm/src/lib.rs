//! One-shot 3D intensity harmonization for multi-site volumetric images.
//!
//! The pipeline: a small tensor/autodiff engine ([`tensor`]), a volume
//! container with normalization and patching ([`volume`]), a synthetic
//! multi-site phantom generator ([`phantom`]), an encoder/decoder style
//! transfer model with adaptive instance normalization ([`model`]), its
//! training objectives ([`losses`]), two-phase training ([`train`]), and
//! harmonization/anatomy-preservation metrics ([`metrics`]).

pub mod losses;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod tensor;
pub mod train;
pub mod volume;

/// Epsilon inside every per-channel standard deviation, matching the usual
/// instance-normalization convention.
pub const STATS_EPSILON: f32 = 1e-5;
