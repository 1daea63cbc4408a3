//! Disagreement-driven embodied perception on synthetic voxel scenes.

pub mod bandit;
pub mod detector;
pub mod disagreement;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod planner;
pub mod policy;
pub mod reconcile;
pub mod rng;
pub mod scene;
pub mod sensor;
pub mod voxel_map;

pub use detector::{Detection, Detector, DetectorProfile};
pub use error::{Error, Result};
pub use geometry::{BBox, Cell, Pixel, Voxel};
pub use harness::{Episode, MetricsFragment, MetricsReport, RunConfig};
pub use policy::PolicyKind;
pub use scene::{Scene, SceneGenConfig};
pub use sensor::{AgentPose, CameraModel, FrameObservation};
pub use voxel_map::SemanticVoxelMap;
