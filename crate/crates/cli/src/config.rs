//! Run configuration, read from a TOML document.

use std::path::{Path, PathBuf};

use bevmine_core::gradproj::ToyConfig;
use bevmine_core::synth::Range;
use bevmine_core::{CameraRig, MiningConfig, NoiseModel, SceneSpec};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Camera rig as written in config and scene files. When `rotation` and
/// `translation` are both given they take precedence over the mounting
/// height and pitch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub mount_height: f64,
    pub pitch: f64,
    /// Row-major LiDAR-to-camera rotation.
    pub rotation: Option<[f64; 9]>,
    pub translation: Option<[f64; 3]>,
}

impl Default for RigConfig {
    fn default() -> Self {
        let rig = CameraRig::kitti_like();
        Self {
            fx: rig.fx(),
            fy: rig.fy(),
            cx: rig.cx(),
            cy: rig.cy(),
            mount_height: 1.65,
            pitch: 0.0,
            rotation: None,
            translation: None,
        }
    }
}

impl RigConfig {
    pub fn build(&self) -> Result<CameraRig, CliError> {
        let rig = match (self.rotation, self.translation) {
            (Some(r), Some(t)) => CameraRig::new(
                self.fx,
                self.fy,
                self.cx,
                self.cy,
                Matrix3::from_row_slice(&r),
                Vector3::from(t),
            ),
            (None, None) => {
                CameraRig::forward_facing(self.fx, self.fy, self.cx, self.cy, self.mount_height, self.pitch)
            }
            _ => {
                return Err(CliError::InvalidConfig(
                    "rig.rotation and rig.translation must be given together".into(),
                ))
            }
        };
        rig.map_err(|e| CliError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Number of scenes per batch; scene `i` uses seed `seed + i`.
    pub count: usize,
    pub n_objects: usize,
    pub x_range: Range,
    pub y_range: Range,
    pub length_range: Range,
    pub width_range: Range,
    pub height_range: Range,
    pub image_width: f64,
    pub image_height: f64,
    pub ground_bump_amplitude: f64,
    pub seed: u64,
    pub rig: RigConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let spec = SceneSpec::default();
        Self {
            count: 4,
            n_objects: spec.n_objects,
            x_range: spec.x_range,
            y_range: spec.y_range,
            length_range: spec.length_range,
            width_range: spec.width_range,
            height_range: spec.height_range,
            image_width: spec.image_width,
            image_height: spec.image_height,
            ground_bump_amplitude: spec.ground_bump_amplitude,
            seed: spec.seed,
            rig: RigConfig::default(),
        }
    }
}

impl SceneConfig {
    /// Spec for scene `index` of the batch.
    pub fn spec(&self, index: usize) -> Result<SceneSpec, CliError> {
        Ok(SceneSpec {
            n_objects: self.n_objects,
            x_range: self.x_range,
            y_range: self.y_range,
            length_range: self.length_range,
            width_range: self.width_range,
            height_range: self.height_range,
            rig: self.rig.build()?,
            image_width: self.image_width,
            image_height: self.image_height,
            ground_bump_amplitude: self.ground_bump_amplitude,
            seed: self.seed.wrapping_add(index as u64),
        })
    }
}

/// Which toy-harness variants to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    On,
    Off,
    Both,
}

impl ProjectionMode {
    pub fn variants(self) -> &'static [bool] {
        match self {
            Self::On => &[true],
            Self::Off => &[false],
            Self::Both => &[true, false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub seeds: Vec<u64>,
    pub projection: ProjectionMode,
    #[serde(flatten)]
    pub toy: ToyConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seeds: (0..4).collect(),
            projection: ProjectionMode::Both,
            toy: ToyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Displacement below which a detection counts as well localized, meters.
    pub good_threshold: f64,
    pub mining: MiningConfig,
    pub noise: NoiseModel,
    pub scene: SceneConfig,
    pub harness: HarnessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mining = MiningConfig::default();
        Self {
            output_dir: PathBuf::from("bevmine-out"),
            good_threshold: mining.theta_h / 2.0,
            mining,
            noise: NoiseModel::default(),
            scene: SceneConfig::default(),
            harness: HarnessConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub theta_c: Option<f64>,
    pub theta_u: Option<f64>,
    pub theta_h: Option<f64>,
    pub t_max: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.theta_c {
            self.mining.theta_c = v;
        }
        if let Some(v) = o.theta_u {
            self.mining.theta_u = v;
        }
        if let Some(v) = o.theta_h {
            self.mining.theta_h = v;
        }
        if let Some(v) = o.t_max {
            self.mining.t_max = v;
        }
        if let Some(v) = o.seed {
            self.scene.seed = v;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: String| CliError::InvalidConfig(e);
        self.mining.validate().map_err(|e| invalid(e.to_string()))?;
        self.noise.validate().map_err(|e| invalid(e.to_string()))?;
        self.scene.spec(0)?.validate().map_err(|e| invalid(e.to_string()))?;
        self.harness.toy.validate().map_err(|e| invalid(e.to_string()))?;
        if !(self.good_threshold > 0.0) {
            return Err(invalid("good_threshold must be positive".into()));
        }
        Ok(())
    }
}
