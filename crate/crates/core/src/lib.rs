//! Unsupervised joint segmentation and shape abstraction of point clouds with
//! constrained deformable superquadrics.
//!
//! A fit optimizes per-point features and membership logits so that sparse
//! convex combinations of point features decode into primitives that
//! reconstruct the cloud. Instance-level and semantic-level part features are
//! aligned by temperature-scaled attention, which yields five coupled outputs:
//! instance labels, semantic labels, an instance abstraction, a semantic
//! abstraction, and an abstraction in which primitives of the same semantic
//! share their geometry.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: the deformable superquadric, its deformation chain and
//!   differentiable surface sampling.
//! - [`activations`]: softmax, sparsemax and straight-through Gumbel selection.
//! - [`membership`]: membership matrices and part-feature aggregation.
//! - [`alignment`]: adaptive temperature, attention and pseudo-labels.
//! - [`decoders`]: linear geometry heads and the pose head.
//! - [`losses`]: the five loss terms and their weighted total.
//! - [`fitter`]: the optimization loop, gradient checks and output extraction.
//! - [`metrics`]: CD, EMD, mIoU, NMI and DBI.
//! - [`io`]: point-cloud loading, exports, configuration and the demo shape.

pub mod activations;
pub mod alignment;
pub mod assignment;
pub mod decoders;
pub mod error;
pub mod fitter;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod membership;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod synthetic;

pub use error::{Error, Result};
pub use fitter::{
    extract_outputs, fit_batch, fit_shape, gradient_check, FitConfig, FitResult,
    GradientReport,
};
pub use geometry::{DsqParams, MirrorPlane, SampledPrimitive};
pub use io::PointCloud;
pub use losses::{LossBreakdown, LossConfig};
pub use membership::{Backend, FitState, LogitInit};
