//! Deterministic synthetic scenes and a monocular-detector noise model.
//!
//! Boxes sit on a ground surface that is flat or gently undulating. Detections
//! are rendered from the boxes with depth-dominated, distance-growing error, a
//! depth uncertainty that tracks the true depth error with tunable fidelity,
//! and a confidence score driven by 2D visibility only.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, normalize_yaw, Box3D, CameraRig, GeomError, PointImage};
use crate::mining::Detection;

/// Placement attempts per object before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Baseline uncertainty mixed into sigma with weight `1 - sigma_fidelity`.
pub const SIGMA_BASELINE: f64 = 0.1;
/// Lower clamp for emitted sigma.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Lower clamp for a corrupted depth, meters.
pub const MIN_NOISY_DEPTH: f64 = 0.5;
const BUMP_WAVES: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("could not place object {index} in view after {attempts} attempts")]
    PlacementFailure { index: usize, attempts: usize },
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Draws from a zero-mean Laplace distribution with scale `b` by inverting
/// its CDF. `b = 0` returns 0.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, b: f64) -> f64 {
    if b == 0.0 {
        return 0.0;
    }
    // u in (-0.5, 0.5]
    let u: f64 = 0.5 - rng.random::<f64>();
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("std is finite and positive").sample(rng)
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

/// Scene layout parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub n_objects: usize,
    /// Forward placement range (LiDAR x), also the admissible camera depth.
    pub x_range: Range,
    /// Lateral placement range (LiDAR y).
    pub y_range: Range,
    pub length_range: Range,
    pub width_range: Range,
    pub height_range: Range,
    pub rig: CameraRig,
    pub image_width: f64,
    pub image_height: f64,
    /// Maximum absolute ground height, meters.
    pub ground_bump_amplitude: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_objects: 12,
            x_range: Range::new(5.0, 45.0),
            y_range: Range::new(-12.0, 12.0),
            length_range: Range::new(3.2, 4.8),
            width_range: Range::new(1.5, 2.0),
            height_range: Range::new(1.4, 1.8),
            rig: CameraRig::kitti_like(),
            image_width: 1242.0,
            image_height: 375.0,
            ground_bump_amplitude: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ranges = [
            ("x_range", self.x_range),
            ("y_range", self.y_range),
            ("length_range", self.length_range),
            ("width_range", self.width_range),
            ("height_range", self.height_range),
        ];
        for (name, r) in ranges {
            if !r.is_valid() {
                return Err(SynthError::InvalidSpec(format!("{name} is empty: {r:?}")));
            }
        }
        for (name, r) in &ranges[2..] {
            if !(r.lo > 0.0) {
                return Err(SynthError::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(SynthError::InvalidSpec("image size must be positive".into()));
        }
        if !(self.ground_bump_amplitude >= 0.0 && self.ground_bump_amplitude.is_finite()) {
            return Err(SynthError::InvalidSpec("bump amplitude must be >= 0".into()));
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every field.
    pub fn hash(&self) -> u64 {
        let mut words: Vec<u64> = vec![self.n_objects as u64, self.seed];
        for r in [
            self.x_range,
            self.y_range,
            self.length_range,
            self.width_range,
            self.height_range,
        ] {
            words.extend([r.lo.to_bits(), r.hi.to_bits()]);
        }
        let rig = &self.rig;
        words.extend([rig.fx(), rig.fy(), rig.cx(), rig.cy()].map(f64::to_bits));
        words.extend(rig.rotation().iter().map(|x| x.to_bits()));
        words.extend(rig.translation().iter().map(|x| x.to_bits()));
        words.extend(
            [self.image_width, self.image_height, self.ground_bump_amplitude].map(f64::to_bits),
        );
        fnv1a(&words)
    }
}

fn fnv1a(words: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Smooth ground height field: a weighted sum of sinusoids whose absolute
/// weights sum to the amplitude, so `|height| <= amplitude` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundSurface {
    waves: Vec<[f64; 4]>,
}

impl GroundSurface {
    pub fn flat() -> Self {
        Self { waves: Vec::new() }
    }

    pub fn seeded(amplitude: f64, seed: u64) -> Self {
        if amplitude == 0.0 {
            return Self::flat();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let raw: Vec<[f64; 4]> = (0..BUMP_WAVES)
            .map(|_| {
                let wavelength = rng.random_range(8.0..40.0);
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / wavelength;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let weight = rng.random_range(0.2..1.0);
                [k * dir.cos(), k * dir.sin(), phase, weight]
            })
            .collect();
        let total: f64 = raw.iter().map(|w| w[3]).sum();
        let waves = raw
            .into_iter()
            .map(|[kx, ky, ph, w]| [kx, ky, ph, amplitude * w / total])
            .collect();
        Self { waves }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|[kx, ky, ph, w]| w * (kx * x + ky * y + ph).sin())
            .sum()
    }
}

/// Where a scene came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub spec_hash: u64,
}

/// Ground truth plus (optionally) rendered detections for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub boxes: Vec<Box3D>,
    pub detections: Vec<Detection>,
    pub rig: CameraRig,
    pub provenance: Provenance,
    /// `gt_match[i]` is the box index of detection `i`.
    pub gt_match: Vec<usize>,
}

impl SceneSample {
    /// Camera-frame depth of the ground-truth bottom center matched to
    /// detection `det_index`.
    pub fn true_depth(&self, det_index: usize) -> Result<f64, GeomError> {
        let b = &self.boxes[self.gt_match[det_index]];
        Ok(geom::project_point(&self.rig, &b.center)?.1)
    }
}

/// Places `spec.n_objects` boxes on the ground, each with its bottom center
/// visible in the image at a camera depth inside `x_range`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneSample, SynthError> {
    spec.validate()?;
    let ground = GroundSurface::seeded(spec.ground_bump_amplitude, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rig = &spec.rig;

    let in_view = |b: &Box3D| -> bool {
        let pts = geom::bottom_points_lidar(b);
        let Ok((center_px, depth)) = geom::project_point(rig, &pts[0]) else {
            return false;
        };
        let inside = (0.0..spec.image_width).contains(&center_px.u)
            && (0.0..spec.image_height).contains(&center_px.v);
        let corners_ahead = pts[1..]
            .iter()
            .all(|p| geom::project_point(rig, p).is_ok_and(|(_, z)| z > MIN_NOISY_DEPTH));
        inside && corners_ahead && spec.x_range.contains(depth)
    };

    let mut boxes = Vec::with_capacity(spec.n_objects);
    for index in 0..spec.n_objects {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x = spec.x_range.sample(&mut rng);
            let y = spec.y_range.sample(&mut rng);
            let length = spec.length_range.sample(&mut rng);
            let width = spec.width_range.sample(&mut rng);
            let height = spec.height_range.sample(&mut rng);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let z = ground.height(x, y);
            let b = Box3D::new(Vector3::new(x, y, z), length, width, height, yaw)?;
            if in_view(&b) {
                placed = Some(b);
                break;
            }
        }
        boxes.push(placed.ok_or(SynthError::PlacementFailure {
            index,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?);
    }

    Ok(SceneSample {
        boxes,
        detections: Vec::new(),
        rig: rig.clone(),
        provenance: Provenance {
            seed: spec.seed,
            spec_hash: spec.hash(),
        },
        gt_match: Vec::new(),
    })
}

/// Maps 2D box height (pixels) to confidence:
/// `sigmoid(bias + slope * h / 100 + N(0, noise_std))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreModel {
    pub bias: f64,
    pub slope_per_100px: f64,
    pub noise_std: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        Self {
            bias: -0.5,
            slope_per_100px: 1.5,
            noise_std: 1.0,
        }
    }
}

/// Detector error model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Laplace scale of the depth error at zero distance, meters.
    pub depth_laplace_base: f64,
    /// Growth of the Laplace scale per meter of true depth.
    pub depth_laplace_per_meter: f64,
    pub yaw_noise_std: f64,
    /// Additive noise on each of `l, w, h`, meters.
    pub size_noise_std: f64,
    pub keypoint_pixel_std: f64,
    /// Weight of the true absolute depth error in sigma, in `[0, 1]`.
    pub sigma_fidelity: f64,
    pub sigma_noise_std: f64,
    pub score_model: ScoreModel,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            depth_laplace_base: 0.1,
            depth_laplace_per_meter: 0.02,
            yaw_noise_std: 0.03,
            size_noise_std: 0.05,
            keypoint_pixel_std: 0.3,
            sigma_fidelity: 0.8,
            sigma_noise_std: 0.02,
            score_model: ScoreModel::default(),
        }
    }
}

impl NoiseModel {
    /// All noise switched off.
    pub fn noiseless() -> Self {
        Self {
            depth_laplace_base: 0.0,
            depth_laplace_per_meter: 0.0,
            yaw_noise_std: 0.0,
            size_noise_std: 0.0,
            keypoint_pixel_std: 0.0,
            sigma_noise_std: 0.0,
            score_model: ScoreModel {
                noise_std: 0.0,
                ..ScoreModel::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let scales = [
            ("depth_laplace_base", self.depth_laplace_base),
            ("depth_laplace_per_meter", self.depth_laplace_per_meter),
            ("yaw_noise_std", self.yaw_noise_std),
            ("size_noise_std", self.size_noise_std),
            ("keypoint_pixel_std", self.keypoint_pixel_std),
            ("sigma_noise_std", self.sigma_noise_std),
            ("score_model.noise_std", self.score_model.noise_std),
        ];
        for (name, v) in scales {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::InvalidNoise(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.sigma_fidelity) {
            return Err(SynthError::InvalidNoise(format!(
                "sigma_fidelity {} outside [0, 1]",
                self.sigma_fidelity
            )));
        }
        Ok(())
    }

    /// Emitted uncertainty for a given true depth error.
    pub fn sigma_for_error<R: Rng + ?Sized>(&self, depth_error: f64, rng: &mut R) -> f64 {
        let g = self.sigma_fidelity;
        let s = g * depth_error.abs() + (1.0 - g) * SIGMA_BASELINE + gaussian(rng, self.sigma_noise_std);
        s.max(SIGMA_FLOOR)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// All 8 corners of a box, bottom face first.
fn box_corners(b: &Box3D) -> Vec<Vector3<f64>> {
    let bottom = geom::bottom_points_lidar(b);
    let up = Vector3::new(0.0, 0.0, b.height);
    bottom[1..]
        .iter()
        .copied()
        .chain(bottom[1..].iter().map(|p| p + up))
        .collect()
}

/// Renders one detection per box with the noise model applied. Detection `i`
/// always comes from box `i`.
pub fn corrupt(sample: &SceneSample, noise: &NoiseModel, seed: u64) -> Result<SceneSample, SynthError> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let rig = &sample.rig;
    let mut detections = Vec::with_capacity(sample.boxes.len());

    for b in &sample.boxes {
        let bottom = geom::bottom_points_lidar(b);
        let mut keypoints = [PointImage::new(0.0, 0.0); 5];
        for (kp, p) in keypoints.iter_mut().zip(&bottom) {
            let (px, _) = geom::project_point(rig, p)?;
            *kp = PointImage::new(
                px.u + gaussian(&mut rng, noise.keypoint_pixel_std),
                px.v + gaussian(&mut rng, noise.keypoint_pixel_std),
            );
        }
        let true_depth = geom::project_point(rig, &b.center)?.1;
        let scale = noise.depth_laplace_base + noise.depth_laplace_per_meter * true_depth;
        let depth = (true_depth + sample_laplace(&mut rng, scale)).max(MIN_NOISY_DEPTH);
        let depth_error = depth - true_depth;

        let yaw = normalize_yaw(b.yaw + gaussian(&mut rng, noise.yaw_noise_std));
        let mut size = [b.length, b.width, b.height];
        for s in &mut size {
            *s = (*s + gaussian(&mut rng, noise.size_noise_std)).max(0.1);
        }
        let sigma = noise.sigma_for_error(depth_error, &mut rng);

        let (mut u1, mut v1, mut u2, mut v2) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for c in box_corners(b) {
            let (px, _) = geom::project_point(rig, &c)?;
            u1 = u1.min(px.u);
            v1 = v1.min(px.v);
            u2 = u2.max(px.u);
            v2 = v2.max(px.v);
        }
        let sm = &noise.score_model;
        let score = sigmoid(sm.bias + sm.slope_per_100px * (v2 - v1) / 100.0 + gaussian(&mut rng, sm.noise_std));

        detections.push(Detection {
            class_id: 0,
            score,
            bbox2d: [u1, v1, u2, v2],
            keypoints,
            depth,
            size,
            yaw,
            sigma,
        });
    }

    Ok(SceneSample {
        gt_match: (0..detections.len()).collect(),
        detections,
        ..sample.clone()
    })
}

/// BEV displacement of a detection's bottom center per meter of depth change
/// along its bottom-center keypoint ray.
pub fn bev_displacement_per_meter(rig: &CameraRig, det: &Detection) -> Result<f64, GeomError> {
    let at = |z: f64| -> Result<geom::PointBev, GeomError> {
        Ok(geom::to_bev(&geom::camera_to_lidar(rig, geom::image_to_camera(rig, det.keypoints[0], z)?)))
    };
    Ok(at(2.0)?.distance(&at(1.0)?))
}

/// Rewrites detection `det_index` so its bottom center sits `displacement`
/// meters (BEV) from where the true depth would put it, moving farther when
/// `farther` is set or when moving closer would leave less than 1 m of depth.
/// Sigma is redrawn from the noise model for the new depth error.
pub fn inject_bev_displacement<R: Rng + ?Sized>(
    sample: &mut SceneSample,
    det_index: usize,
    displacement: f64,
    farther: bool,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<(), GeomError> {
    let true_depth = sample.true_depth(det_index)?;
    let det = &mut sample.detections[det_index];
    let per_meter = bev_displacement_per_meter(&sample.rig, det)?;
    let delta = displacement / per_meter;
    let depth = if farther || true_depth - delta < 1.0 {
        true_depth + delta
    } else {
        true_depth - delta
    };
    det.depth = depth;
    det.sigma = noise.sigma_for_error(depth - true_depth, rng);
    Ok(())
}
