//! Core algorithms for direct 3D multi-object tracking.
//!
//! The crate tracks rigid objects in a monocular image sequence given
//! per-frame depth maps, instance segmentation masks and amodal 2D
//! detections. Frame-to-frame motion comes from direct image alignment,
//! trajectories are refined by sliding-window photometric bundle
//! adjustment, amodal 3D boxes are detected by joint optimization over
//! 2D and 3D cues, and results are scored with HOTA/CLEARMOT over 2D
//! IoU, 3D IoU or normalized 3D GIoU similarities.
//!
//! The crate is `no_std` (alloc required); all IO, file formats and the
//! frame-loop orchestration live in the companion `dmot` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod alignment;
pub mod association;
pub mod detect;
pub mod geom2d;
pub mod geometry;
pub mod hungarian;
pub mod imaging;
pub mod metrics;
pub mod window;

pub use geometry::{CameraIntrinsics, Huber, Pose4DoF, RigidTransform, Twist};
pub use imaging::{DepthMap, Image, InstanceMask, ObjectPyramid};
