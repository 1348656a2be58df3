//! Decoupled pseudo-label generation.
//!
//! 2D attributes are gated on classification confidence alone. 3D attributes
//! go through homography-based mining: a seed set picked by depth uncertainty
//! fits an image-to-BEV homography, every other candidate is scored by how far
//! its model-derived bottom center lands from the homography image of its
//! bottom-center keypoint, and candidates under the threshold join the set.
//! The fit/score/grow loop repeats until the set stops changing or the
//! iteration budget is spent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, CameraRig, GeomError, PointImage};
use crate::homography::{self, Correspondence, HomographyError, HomographyMatrix};

/// Minimum number of seed detections needed to fit the first homography.
pub const MIN_SEED_OBJECTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MiningError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Homography(#[from] HomographyError),
    #[error("insufficient seed: {0}")]
    InsufficientSeed(String),
    #[error("invalid mining config: {0}")]
    InvalidConfig(String),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
}

/// One teacher prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: u32,
    /// Classification confidence in `[0, 1]`.
    pub score: f64,
    /// `(u1, v1, u2, v2)` with `u1 < u2`, `v1 < v2`.
    pub bbox2d: [f64; 4],
    /// Bottom center, then the 4 bottom corners in footprint order.
    pub keypoints: [PointImage; 5],
    /// Camera-frame depth of the bottom center, meters.
    pub depth: f64,
    /// `(l, w, h)` meters.
    pub size: [f64; 3],
    /// LiDAR-frame yaw in `(-pi, pi]`.
    pub yaw: f64,
    /// Predicted depth uncertainty.
    pub sigma: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<(), MiningError> {
        let bad = |msg: String| Err(MiningError::InvalidDetection(msg));
        if !(0.0..=1.0).contains(&self.score) {
            return bad(format!("score {} outside [0, 1]", self.score));
        }
        let [u1, v1, u2, v2] = self.bbox2d;
        if !(u1 < u2 && v1 < v2) {
            return bad(format!("malformed 2D box {:?}", self.bbox2d));
        }
        if self.keypoints.iter().any(|k| !(k.u.is_finite() && k.v.is_finite())) {
            return bad("non-finite keypoint".into());
        }
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return bad(format!("depth {} must be positive", self.depth));
        }
        if self.size.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad(format!("size {:?} must be positive", self.size));
        }
        if !(self.yaw > -std::f64::consts::PI && self.yaw <= std::f64::consts::PI) {
            return bad(format!("yaw {} outside (-pi, pi]", self.yaw));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be positive", self.sigma));
        }
        Ok(())
    }
}

/// Thresholds for pseudo-label generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    /// Confidence threshold for 2D pseudo-labels (inclusive).
    pub theta_c: f64,
    /// Depth-uncertainty threshold for the seed set (strict).
    pub theta_u: f64,
    /// BEV localization-error threshold in meters (strict).
    pub theta_h: f64,
    pub t_max: usize,
    /// Detections at or below this score are background.
    pub background_score: f64,
    /// Weight of the unsupervised 3D loss.
    pub alpha: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            theta_c: 0.4,
            theta_u: 0.1,
            theta_h: 2.0,
            t_max: 10,
            background_score: 0.2,
            alpha: 1.0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        let positive = [
            ("theta_c", self.theta_c),
            ("theta_u", self.theta_u),
            ("theta_h", self.theta_h),
            ("background_score", self.background_score),
            ("alpha", self.alpha),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(MiningError::InvalidConfig(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if self.t_max < 1 {
            return Err(MiningError::InvalidConfig("t_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// State after one mining iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningIteration {
    pub homography: HomographyMatrix,
    /// Selected set after the iteration, ascending.
    pub selected: Vec<usize>,
}

/// Result of pseudo-label generation for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelSet {
    pub labels_2d: Vec<usize>,
    /// Final 3D pseudo-labels, ascending.
    pub labels_3d: Vec<usize>,
    /// The uncertainty-selected seed set.
    pub seed: Vec<usize>,
    pub iterations_used: usize,
    /// Last localization error computed for each candidate.
    pub per_candidate_error: BTreeMap<usize, f64>,
    pub trace: Vec<MiningIteration>,
    /// Set when the seed could not support a homography fit and the seed set
    /// was returned unchanged.
    pub fallback: Option<MiningError>,
}

/// Keeps detections scoring strictly above the background threshold.
pub fn background_filter(dets: &[Detection], cfg: &MiningConfig) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.score > cfg.background_score)
        .cloned()
        .collect()
}

fn background_indices(dets: &[Detection], cfg: &MiningConfig) -> Vec<usize> {
    dets.iter()
        .enumerate()
        .filter(|(_, d)| d.score > cfg.background_score)
        .map(|(i, _)| i)
        .collect()
}

/// Indices with `score >= theta_c`.
pub fn select_2d(dets: &[Detection], cfg: &MiningConfig) -> Vec<usize> {
    dets.iter()
        .enumerate()
        .filter(|(_, d)| d.score >= cfg.theta_c)
        .map(|(i, _)| i)
        .collect()
}

/// Indices with `sigma < theta_u`.
pub fn uncertainty_filter(dets: &[Detection], cfg: &MiningConfig) -> Vec<usize> {
    dets.iter()
        .enumerate()
        .filter(|(_, d)| d.sigma < cfg.theta_u)
        .map(|(i, _)| i)
        .collect()
}

/// BEV distance between the model-derived bottom center and the homography
/// image of the bottom-center keypoint.
pub fn localization_error(
    m: &HomographyMatrix,
    det: &Detection,
    rig: &CameraRig,
) -> Result<f64, MiningError> {
    let model = geom::detection_bev_center(rig, det)?;
    let mapped = m.apply(det.keypoints[0])?;
    Ok(model.distance(&mapped))
}

/// Image/BEV pairs for all 5 candidate points of each listed detection.
pub fn correspondences(
    dets: &[Detection],
    indices: &[usize],
    rig: &CameraRig,
) -> Result<Vec<Correspondence>, MiningError> {
    let mut pairs = Vec::with_capacity(5 * indices.len());
    for &i in indices {
        let det = &dets[i];
        let bev = geom::detection_bev_points(rig, det)?;
        pairs.extend(
            det.keypoints
                .iter()
                .zip(bev)
                .map(|(img, bev)| Correspondence::new(*img, bev)),
        );
    }
    Ok(pairs)
}

fn fit(dets: &[Detection], selected: &[usize], rig: &CameraRig) -> Result<HomographyMatrix, MiningError> {
    Ok(homography::dlt_solve(&correspondences(dets, selected, rig)?)?)
}

/// Iterative homography-based mining of 3D pseudo-labels over background-
/// filtered detections of one image. Indices refer to `dets`.
pub fn hpm_mine(dets: &[Detection], rig: &CameraRig, cfg: &MiningConfig) -> PseudoLabelSet {
    let seed = uncertainty_filter(dets, cfg);
    let mut result = PseudoLabelSet {
        labels_2d: select_2d(dets, cfg),
        labels_3d: seed.clone(),
        seed: seed.clone(),
        ..Default::default()
    };

    if seed.len() < MIN_SEED_OBJECTS {
        result.fallback = Some(MiningError::InsufficientSeed(format!(
            "{} seed detection(s), need {MIN_SEED_OBJECTS}",
            seed.len()
        )));
        return result;
    }

    let mut in_set = vec![false; dets.len()];
    for &i in &seed {
        in_set[i] = true;
    }
    let mut selected = seed;

    for t in 1..=cfg.t_max {
        let m = match fit(dets, &selected, rig) {
            Ok(m) => m,
            Err(e) if t == 1 => {
                result.fallback = Some(MiningError::InsufficientSeed(e.to_string()));
                return result;
            }
            // Later fits only add points to a set that already solved; stop
            // with the last good set if one still fails.
            Err(_) => break,
        };

        let mut added = Vec::new();
        for (j, det) in dets.iter().enumerate() {
            if in_set[j] {
                continue;
            }
            if let Ok(eps) = localization_error(&m, det, rig) {
                result.per_candidate_error.insert(j, eps);
                if eps < cfg.theta_h {
                    added.push(j);
                }
            }
        }
        for &j in &added {
            in_set[j] = true;
        }
        selected.extend_from_slice(&added);
        selected.sort_unstable();

        result.iterations_used = t;
        result.trace.push(MiningIteration {
            homography: m,
            selected: selected.clone(),
        });
        if added.is_empty() {
            break;
        }
    }

    result.labels_3d = selected;
    result
}

/// Background filter, then independent 2D confidence gating and 3D mining.
/// Returned indices refer to the unfiltered `dets`.
pub fn decoupled_generate(dets: &[Detection], rig: &CameraRig, cfg: &MiningConfig) -> PseudoLabelSet {
    let kept = background_indices(dets, cfg);
    let filtered: Vec<Detection> = kept.iter().map(|&i| dets[i].clone()).collect();
    let mut out = hpm_mine(&filtered, rig, cfg);

    let remap = |v: &mut Vec<usize>| v.iter_mut().for_each(|i| *i = kept[*i]);
    remap(&mut out.labels_2d);
    remap(&mut out.labels_3d);
    remap(&mut out.seed);
    for it in &mut out.trace {
        remap(&mut it.selected);
    }
    out.per_candidate_error = out
        .per_candidate_error
        .into_iter()
        .map(|(i, e)| (kept[i], e))
        .collect();
    out
}
