//! Multi-view correspondence scoring for per-view feature maps, plus the
//! contrastive correspondence and teacher-distillation losses used to make
//! those features agree across views.
//!
//! Pipeline: [`tensor_io`] loads a posed RGB-D scene, [`geometry`] lifts depth
//! to world coordinates at feature resolution, [`voxel`] groups cells into a
//! voxel grid and mines positive/negative pairs, [`metrics`] scores them, and
//! [`losses`]/[`trainer`] supervise the features.

pub mod cli;
pub mod error;
pub mod features;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod tensor_io;
pub mod trainer;
pub mod voxel;

pub use error::{Error, Result};
pub use features::FeatureMap;
pub use tensor_io::{FrameRecord, Scene, Tensor};
