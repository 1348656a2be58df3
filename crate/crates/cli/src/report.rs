//! Mining report JSON and DGP CSV rows.

use std::path::Path;

use bevmine_core::eval::{self, ConflictPair};
use bevmine_core::gradproj::ConflictReport;
use bevmine_core::{MiningConfig, PseudoLabelSet};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::scene_io::to_exact_json;

pub const REPORT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateError {
    pub index: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Unit-Frobenius homography, row-major.
    pub homography: [f64; 9],
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene: usize,
    pub seed: u64,
    pub n_detections: usize,
    pub labels_2d: Vec<usize>,
    pub labels_3d: Vec<usize>,
    pub seed_set: Vec<usize>,
    pub iterations_used: usize,
    pub fallback: bool,
    pub fallback_reason: Option<String>,
    pub per_candidate_error: Vec<CandidateError>,
    pub iterations: Vec<IterationRecord>,
}

impl SceneReport {
    pub fn new(scene: usize, seed: u64, n_detections: usize, r: &PseudoLabelSet) -> Self {
        Self {
            scene,
            seed,
            n_detections,
            labels_2d: r.labels_2d.clone(),
            labels_3d: r.labels_3d.clone(),
            seed_set: r.seed.clone(),
            iterations_used: r.iterations_used,
            fallback: r.fallback.is_some(),
            fallback_reason: r.fallback.as_ref().map(|e| e.to_string()),
            per_candidate_error: r
                .per_candidate_error
                .iter()
                .map(|(&index, &error)| CandidateError { index, error })
                .collect(),
            iterations: r
                .trace
                .iter()
                .map(|it| IterationRecord {
                    homography: it.homography.to_row_major(),
                    selected: it.selected.clone(),
                })
                .collect(),
        }
    }

    /// Largest detection index mentioned anywhere in the report.
    pub fn max_index(&self) -> Option<usize> {
        self.labels_2d
            .iter()
            .chain(&self.labels_3d)
            .chain(&self.seed_set)
            .chain(self.per_candidate_error.iter().map(|c| &c.index))
            .chain(self.iterations.iter().flat_map(|it| &it.selected))
            .copied()
            .max()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub format_version: u64,
    pub config: MiningConfig,
    pub scenes: Vec<SceneReport>,
}

impl MiningReport {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = to_exact_json(self);
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let report: Self = serde_json::from_str(&text).map_err(|e| CliError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if report.format_version != REPORT_VERSION {
            return Err(CliError::UnsupportedVersion(report.format_version));
        }
        Ok(report)
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub seed: u64,
    pub projection: bool,
    pub step: usize,
    pub cos_ud_p: f64,
    pub cos_ud_sd: f64,
    pub cos_ud_o: f64,
    pub cos_sd_o: f64,
    pub loss_sd: f64,
    pub loss_ud: f64,
    pub loss_o: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub projection: bool,
    pub final_loss_sd: f64,
    pub final_loss_ud: f64,
    pub final_loss_o: f64,
    pub final_reliable_loss: f64,
    pub conflict_ud_sd: f64,
    pub conflict_ud_o: f64,
    pub conflict_sd_o: f64,
    pub conflict_ud_p: f64,
}

impl SummaryRow {
    pub fn from_report(r: &ConflictReport) -> Self {
        let c = eval::conflict_proportions(r);
        Self {
            seed: r.seed,
            projection: r.projection,
            final_loss_sd: r.final_loss_sd,
            final_loss_ud: r.final_loss_ud,
            final_loss_o: r.final_loss_o,
            final_reliable_loss: r.final_reliable_loss(),
            conflict_ud_sd: c[&ConflictPair::UdSd],
            conflict_ud_o: c[&ConflictPair::UdO],
            conflict_sd_o: c[&ConflictPair::SdO],
            conflict_ud_p: c[&ConflictPair::UdP],
        }
    }
}

pub fn trace_rows(r: &ConflictReport) -> impl Iterator<Item = TraceRow> + '_ {
    r.steps.iter().map(move |s| TraceRow {
        seed: r.seed,
        projection: r.projection,
        step: s.step,
        cos_ud_p: s.cos_ud_p,
        cos_ud_sd: s.cos_ud_sd,
        cos_ud_o: s.cos_ud_o,
        cos_sd_o: s.cos_sd_o,
        loss_sd: s.loss_sd,
        loss_ud: s.loss_ud,
        loss_o: s.loss_o,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    for row in rows {
        w.serialize(row).map_err(io_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| CliError::Parse {
                path: path.display().to_string(),
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })
        })
        .collect()
}
