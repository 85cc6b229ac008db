//! Geometric ODIN.
//!
//! Softmax-linear classifiers whose final layer decomposes each logit into a
//! feature norm, a class weight norm and a cosine, with per-instance `alpha`
//! (sigmoid) and `beta` (softplus) heads rescaling the norm. The crate covers
//! the full loop: training a small rectified MLP, scoring samples for
//! covariate and concept shift, benchmarking detection under controlled
//! shifts, and post-hoc order-preserving calibration.

pub mod bench;
pub mod calibration;
pub mod dataset;
pub mod error;
pub mod head;
pub mod linalg;
pub mod persistence;
pub mod scores;
pub mod trainer;

pub use dataset::Dataset;
pub use error::{GeodinError, Result};
pub use head::{HeadParams, HeadVariant};
pub use scores::{FeatureVector, GeometryView, ScoreSet};
pub use trainer::{Model, TrainConfig};

/// Norms below this are treated as zero when forming cosines.
pub const EPS_NORM: f64 = 1e-12;
