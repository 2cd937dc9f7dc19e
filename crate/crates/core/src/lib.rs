//! Geometry, losses, solvers, tiled stitching and multi-view alignment for
//! pointmap-based two-view reconstruction with optional priors.

pub mod align;
pub mod conditioning;
pub mod error;
pub mod geom;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod numeric;
pub mod prediction;
pub mod solvers;
pub mod stitch;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{
    compose_relative, project, swap_frame, unproject, CameraIntrinsics, ConfidenceMap, DepthMap,
    FrameTransform, Grid, PixelGrid, PointMap, RigidPose,
};
pub use prediction::PairPrediction;
