//! Geometry and optimization core for decoupled pseudo-labeling in
//! semi-supervised monocular 3D detection.
//!
//! - [`geom`]: pinhole camera, box footprints, image/camera/LiDAR/BEV transforms.
//! - [`homography`]: image-to-ground homographies and normalized DLT.
//! - [`mining`]: confidence gating for 2D labels and iterative homography
//!   mining for 3D labels.
//! - [`gradproj`]: Laplacian depth loss, depth-gradient projection, EMA and a
//!   toy training harness.
//! - [`synth`]: seeded synthetic scenes and a detector noise model.
//! - [`eval`]: correlation, localization-error, selection and conflict metrics.

pub mod eval;
pub mod geom;
pub mod gradproj;
pub mod homography;
pub mod mining;
pub mod synth;

pub use geom::{Box3D, CameraRig, PointBev, PointCam, PointImage};
pub use homography::{Correspondence, HomographyMatrix};
pub use mining::{Detection, MiningConfig, PseudoLabelSet};
pub use synth::{NoiseModel, SceneSample, SceneSpec};
