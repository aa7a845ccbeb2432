//! Hierarchical object-and-point visual odometry and mapping.
//!
//! Objects are modelled as ellipsoids (dual quadrics) observed through
//! ellipses fitted to instance contours; feature points carry binary
//! descriptors. Objects are associated with a normalized Wasserstein
//! similarity and then used to seed point matching, which drives a two-stage
//! pose refinement and a local bundle adjustment over points only.

pub mod association;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod map;
pub mod metrics;
pub mod optimize;
pub mod pipeline;
pub mod sim;

pub use geometry::{
    BBox, DualQuadric, Ellipse2D, Ellipsoid, Gaussian2D, GeometryError, Intrinsics, Pose,
};
pub use metrics::{MetricConfig, WassersteinForm};
pub use features::{Descriptor, Detection, Keypoint, ObservationModel};
pub use map::{KeyFrame, KeyFrameId, Map, MapPoint, MapPointId, ObjectId, ObjectLandmark};
pub use association::{AssociationConfig, AssociationMethod};
pub use optimize::{OptimizeError, SolverConfig};
pub use pipeline::{Ablation, Frame, PipelineConfig};
