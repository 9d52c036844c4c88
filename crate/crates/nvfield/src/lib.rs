//! Dynamic radiance fields with a disentangled physical velocity field.
//!
//! The crate trains two coupled models from multi-view videos of a dynamic
//! scene: a keyframe radiance field (factorized feature planes fused by
//! Hadamard products, with a keyframe-indexed time axis) and a velocity field
//! (an MLP weighting a fixed twist basis). Keyframe timestamps are supervised
//! photometrically; every other timestamp is supervised by transporting ray
//! samples to the nearest keyframe through the velocity field and rendering
//! the retrieved features. Divergence-free and momentum-conservation residuals
//! regularize the velocity so it stays physically meaningful beyond the
//! training span.
//!
//! On top of the trained pair the crate implements future-frame extrapolation,
//! unsupervised object decomposition (a per-point object-code MLP fit with
//! rigid-consistency and smoothness losses), object tracking, and motion
//! transfer onto an independently trained static field.
//!
//! Everything runs on CPU; gradients come from the small reverse-mode tape in
//! [`diffcore`]. See the `examples/` directory for one runnable program per
//! capability and the `nvfield` binary for the batch CLI.

pub mod cli;
pub mod decomposition;
pub mod diffcore;
pub mod keyframe_field;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod physics;
pub mod renderer;
pub mod sampling;
pub mod scene_io;
pub mod selftest;
pub mod trainer;
pub mod transport;
pub mod velocity_field;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("non-finite value produced by primitive `{0}`")]
    NonFinite(&'static str),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
