//! Metrics over mining results and gradient traces.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, PointBev};
use crate::gradproj::ConflictReport;
use crate::homography::{self, Correspondence, HomographyError, HomographyMatrix};
use crate::mining::{self, PseudoLabelSet};
use crate::synth::SceneSample;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("series is constant")]
    DegenerateSeries,
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateSeries);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Summary of an error series in meters. All zeros when `n == 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub n: usize,
}

/// Linear-interpolated quantile of an ascending slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl ErrorStats {
    pub fn from_series(name: impl Into<String>, values: &[f64]) -> Self {
        let name = name.into();
        if values.is_empty() {
            return Self { name, mean: 0.0, median: 0.0, p90: 0.0, n: 0 };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            name,
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: quantile(&sorted, 0.5),
            p90: quantile(&sorted, 0.9),
            n: values.len(),
        }
    }
}

/// Which objects to measure localization error on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocErrorSource {
    /// Exact projections of the ground-truth bottom centers.
    GroundTruth,
    /// Detections, via [`mining::localization_error`].
    Detections,
}

impl fmt::Display for LocErrorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GroundTruth => "gt",
            Self::Detections => "detections",
        })
    }
}

/// Per-object localization errors under `m`. Objects whose bottom center maps
/// to infinity are skipped.
pub fn loc_errors(sample: &SceneSample, m: &HomographyMatrix, which: LocErrorSource) -> Vec<f64> {
    match which {
        LocErrorSource::GroundTruth => sample
            .boxes
            .iter()
            .filter_map(|b| {
                let (px, _) = geom::project_point(&sample.rig, &b.center).ok()?;
                let mapped = m.apply(px).ok()?;
                Some(mapped.distance(&geom::to_bev(&b.center)))
            })
            .collect(),
        LocErrorSource::Detections => sample
            .detections
            .iter()
            .filter_map(|d| mining::localization_error(m, d, &sample.rig).ok())
            .collect(),
    }
}

pub fn loc_error_stats(sample: &SceneSample, m: &HomographyMatrix, which: LocErrorSource) -> ErrorStats {
    ErrorStats::from_series(format!("loc_err_{which}"), &loc_errors(sample, m, which))
}

/// Homography fitted by DLT to the exact image/BEV positions of every
/// ground-truth bottom point in the scene.
pub fn gt_fitted_homography(sample: &SceneSample) -> Result<HomographyMatrix, HomographyError> {
    let mut pairs = Vec::with_capacity(5 * sample.boxes.len());
    for b in &sample.boxes {
        for p in geom::bottom_points_lidar(b) {
            if let Ok((px, _)) = geom::project_point(&sample.rig, &p) {
                pairs.push(Correspondence::new(px, geom::to_bev(&p)));
            }
        }
    }
    homography::dlt_solve(&pairs)
}

/// BEV distance between each detection's model-derived bottom center and the
/// true bottom center of its matched box. NaN when the detection is invalid.
pub fn detection_displacements(sample: &SceneSample) -> Vec<f64> {
    sample
        .detections
        .iter()
        .zip(&sample.gt_match)
        .map(|(d, &gi)| {
            let truth: PointBev = geom::to_bev(&sample.boxes[gi].center);
            geom::detection_bev_center(&sample.rig, d).map_or(f64::NAN, |p| p.distance(&truth))
        })
        .collect()
}

/// Precision and recall of the 3D pseudo-labels against detections whose true
/// displacement is within `good_threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub n_selected: usize,
    pub n_good: usize,
    pub n_true_positive: usize,
    pub n_candidates: usize,
    pub good_threshold: f64,
}

impl SelectionMetrics {
    /// Builds metrics from raw counts; empty denominators give 1.0.
    pub fn from_counts(
        n_selected: usize,
        n_good: usize,
        n_true_positive: usize,
        n_candidates: usize,
        good_threshold: f64,
    ) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        Self {
            precision: ratio(n_true_positive, n_selected),
            recall: ratio(n_true_positive, n_good),
            n_selected,
            n_good,
            n_true_positive,
            n_candidates,
            good_threshold,
        }
    }
}

/// Default "good" displacement: half of the default mining threshold.
pub const DEFAULT_GOOD_THRESHOLD: f64 = 1.0;

pub fn selection_metrics(sample: &SceneSample, result: &PseudoLabelSet, good_threshold: f64) -> SelectionMetrics {
    let good: Vec<bool> = detection_displacements(sample)
        .into_iter()
        .map(|d| d <= good_threshold)
        .collect();
    let n_good = good.iter().filter(|g| **g).count();
    let tp = result
        .labels_3d
        .iter()
        .filter(|&&i| good.get(i).copied().unwrap_or(false))
        .count();
    SelectionMetrics::from_counts(result.labels_3d.len(), n_good, tp, sample.detections.len(), good_threshold)
}

/// Gradient pairs tracked in conflict statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConflictPair {
    UdSd,
    UdO,
    SdO,
    /// Pseudo-label depth vs. the principal gradient.
    UdP,
}

impl ConflictPair {
    pub const ALL: [ConflictPair; 4] = [Self::UdSd, Self::UdO, Self::SdO, Self::UdP];

    pub fn name(&self) -> &'static str {
        match self {
            Self::UdSd => "ud_sd",
            Self::UdO => "ud_o",
            Self::SdO => "sd_o",
            Self::UdP => "ud_p",
        }
    }
}

/// Fraction of steps where each pair has negative cosine. NaN cosines count
/// as no conflict. An empty trace yields zeros.
pub fn conflict_proportions(trace: &ConflictReport) -> BTreeMap<ConflictPair, f64> {
    let n = trace.steps.len();
    ConflictPair::ALL
        .into_iter()
        .map(|pair| {
            if n == 0 {
                return (pair, 0.0);
            }
            let conflicts = trace
                .steps
                .iter()
                .filter(|s| {
                    let c = match pair {
                        ConflictPair::UdSd => s.cos_ud_sd,
                        ConflictPair::UdO => s.cos_ud_o,
                        ConflictPair::SdO => s.cos_sd_o,
                        ConflictPair::UdP => s.cos_ud_p,
                    };
                    c < 0.0
                })
                .count();
            (pair, conflicts as f64 / n as f64)
        })
        .collect()
}
