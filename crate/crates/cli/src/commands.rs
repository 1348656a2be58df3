use std::path::{Path, PathBuf};

use bevmine_core::eval::{self, LocErrorSource};
use bevmine_core::gradproj::{self, ConflictReport, ToyConfig};
use bevmine_core::homography;
use bevmine_core::mining;
use bevmine_core::synth;
use bevmine_core::{HomographyMatrix, SceneSample, SceneSpec};
use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::{self, MetricRow, MiningReport, SceneReport, SummaryRow, REPORT_VERSION};
use crate::scene_io;

pub const THREADS_ENV: &str = "BEVMINE_THREADS";

/// Worker pool capped by `BEVMINE_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::InvalidConfig(format!("thread pool: {e}")))
}

/// Generates `cfg.scene.count` corrupted scenes and writes them to `out_path`.
pub fn cmd_generate(cfg: &RunConfig, out_path: &Path) -> Result<Vec<SceneSample>, CliError> {
    cfg.validate()?;
    let specs: Vec<SceneSpec> = (0..cfg.scene.count)
        .map(|i| cfg.scene.spec(i))
        .collect::<Result<_, _>>()?;
    let scenes: Vec<SceneSample> = thread_pool()?.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let clean = synth::generate_scene(spec)?;
                synth::corrupt(&clean, &cfg.noise, spec.seed)
            })
            .collect::<Result<_, _>>()
    })?;
    scene_io::write_scene_file(out_path, &scenes, Some(&specs))?;
    Ok(scenes)
}

/// Mines pseudo-labels for every scene in the file. Mining failures are
/// recorded in the scene's entry and do not abort the batch.
pub fn cmd_mine(scene_path: &Path, cfg: &RunConfig, report_path: &Path) -> Result<MiningReport, CliError> {
    cfg.mining
        .validate()
        .map_err(|e| CliError::InvalidConfig(e.to_string()))?;
    let scenes = scene_io::read_scene_file(scene_path)?;
    let entries: Vec<SceneReport> = thread_pool()?.install(|| {
        scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let result = mining::decoupled_generate(&s.detections, &s.rig, &cfg.mining);
                SceneReport::new(i, s.provenance.seed, s.detections.len(), &result)
            })
            .collect()
    });
    let report = MiningReport {
        format_version: REPORT_VERSION,
        config: cfg.mining.clone(),
        scenes: entries,
    };
    report.write(report_path)?;
    Ok(report)
}

fn check_consistent(scenes: &[SceneSample], report: &MiningReport) -> Result<(), CliError> {
    if scenes.len() != report.scenes.len() {
        return Err(CliError::MismatchedInputs(format!(
            "scene file has {} scenes, report has {}",
            scenes.len(),
            report.scenes.len()
        )));
    }
    for (s, r) in scenes.iter().zip(&report.scenes) {
        let n = s.detections.len();
        if r.n_detections != n {
            return Err(CliError::MismatchedInputs(format!(
                "scene {}: report expects {} detections, file has {n}",
                r.scene, r.n_detections
            )));
        }
        if let Some(max) = r.max_index().filter(|&m| m >= n) {
            return Err(CliError::MismatchedInputs(format!(
                "scene {}: report references detection {max} but the scene has {n}",
                r.scene
            )));
        }
    }
    Ok(())
}

/// Homography the ground-truth error is measured under: a DLT fit to the
/// exact bottom points, or the analytic ground map when the fit is degenerate.
fn reference_homography(s: &SceneSample) -> Option<HomographyMatrix> {
    eval::gt_fitted_homography(s)
        .or_else(|_| homography::ground_truth_homography(&s.rig))
        .ok()
}

fn push_stats(rows: &mut Vec<MetricRow>, suffix: &str, values: &[f64]) {
    let st = eval::ErrorStats::from_series(suffix, values);
    for (name, value) in [("mean", st.mean), ("median", st.median), ("p90", st.p90)] {
        rows.push(MetricRow {
            metric: format!("{name}_{suffix}"),
            value,
            n: st.n,
        });
    }
}

/// Pooled metrics over all scenes of a scene/report pair.
pub fn evaluate(scenes: &[SceneSample], report: &MiningReport, good_threshold: f64) -> Result<Vec<MetricRow>, CliError> {
    check_consistent(scenes, report)?;
    let (mut n_sel, mut n_good, mut n_tp, mut n_cand) = (0, 0, 0, 0);
    let (mut gt_err, mut det_err, mut mined_err) = (Vec::new(), Vec::new(), Vec::new());
    let (mut scores, mut sigmas, mut depth_err) = (Vec::new(), Vec::new(), Vec::new());
    let mut fallbacks = 0;

    for (s, r) in scenes.iter().zip(&report.scenes) {
        let good: Vec<bool> = eval::detection_displacements(s)
            .into_iter()
            .map(|d| d <= good_threshold)
            .collect();
        n_good += good.iter().filter(|g| **g).count();
        n_sel += r.labels_3d.len();
        n_tp += r.labels_3d.iter().filter(|&&i| good[i]).count();
        n_cand += s.detections.len();
        fallbacks += usize::from(r.fallback);

        if let Some(h) = reference_homography(s) {
            gt_err.extend(eval::loc_errors(s, &h, LocErrorSource::GroundTruth));
            det_err.extend(eval::loc_errors(s, &h, LocErrorSource::Detections));
        }
        if let Some(last) = r.iterations.last() {
            if let Ok(h) = HomographyMatrix::new(Matrix3::from_row_slice(&last.homography)) {
                mined_err.extend(eval::loc_errors(s, &h, LocErrorSource::GroundTruth));
            }
        }
        for (k, d) in s.detections.iter().enumerate() {
            if let Ok(truth) = s.true_depth(k) {
                scores.push(d.score);
                sigmas.push(d.sigma);
                depth_err.push((d.depth - truth).abs());
            }
        }
    }

    let sel = eval::SelectionMetrics::from_counts(n_sel, n_good, n_tp, n_cand, good_threshold);
    let mut rows = vec![
        MetricRow { metric: "precision".into(), value: sel.precision, n: n_sel },
        MetricRow { metric: "recall".into(), value: sel.recall, n: n_good },
        MetricRow { metric: "selected".into(), value: n_sel as f64, n: n_cand },
        MetricRow {
            metric: "fallback_rate".into(),
            value: if scenes.is_empty() { 0.0 } else { fallbacks as f64 / scenes.len() as f64 },
            n: scenes.len(),
        },
    ];
    push_stats(&mut rows, "loc_err_gt", &gt_err);
    push_stats(&mut rows, "loc_err_det", &det_err);
    push_stats(&mut rows, "loc_err_mined", &mined_err);
    // Undefined correlations are reported as 0.
    for (name, xs) in [("pcc_score_depth_err", &scores), ("pcc_sigma_depth_err", &sigmas)] {
        rows.push(MetricRow {
            metric: name.into(),
            value: eval::pearson(xs, &depth_err).unwrap_or(0.0),
            n: depth_err.len(),
        });
    }
    Ok(rows)
}

pub fn cmd_eval(
    scene_path: &Path,
    report_path: &Path,
    out_csv: &Path,
    good_threshold: f64,
) -> Result<Vec<MetricRow>, CliError> {
    let scenes = scene_io::read_scene_file(scene_path)?;
    let report = MiningReport::read(report_path)?;
    let rows = evaluate(&scenes, &report, good_threshold)?;
    report::write_csv(out_csv, &rows)?;
    Ok(rows)
}

/// `trace.csv` -> `trace_summary.csv`
pub fn summary_path(out_csv: &Path) -> PathBuf {
    let stem = out_csv.file_stem().map_or_else(|| "dgp".into(), |s| s.to_string_lossy().into_owned());
    out_csv.with_file_name(format!("{stem}_summary.csv"))
}

/// Runs the toy experiment for every configured seed and projection variant,
/// writing the per-step trace to `out_csv` and one summary row per run next
/// to it.
pub fn cmd_dgp(cfg: &RunConfig, out_csv: &Path) -> Result<Vec<ConflictReport>, CliError> {
    let h = &cfg.harness;
    h.toy
        .validate()
        .map_err(|e| CliError::InvalidConfig(e.to_string()))?;
    if h.seeds.is_empty() {
        return Err(CliError::InvalidConfig("harness.seeds is empty".into()));
    }
    let jobs: Vec<(u64, bool)> = h
        .seeds
        .iter()
        .flat_map(|&s| h.projection.variants().iter().map(move |&p| (s, p)))
        .collect();
    let reports: Vec<ConflictReport> = thread_pool()?.install(|| {
        jobs.par_iter()
            .map(|&(seed, projection)| {
                let toy = ToyConfig { projection, ..h.toy.clone() };
                gradproj::run_toy_experiment(&toy, seed)
            })
            .collect::<Result<_, _>>()
    })?;
    report::write_csv(out_csv, reports.iter().flat_map(report::trace_rows))?;
    report::write_csv(&summary_path(out_csv), reports.iter().map(SummaryRow::from_report))?;
    Ok(reports)
}

/// Files written by [`cmd_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutputs {
    pub scenes: PathBuf,
    pub report: PathBuf,
    pub metrics: PathBuf,
    pub dgp_trace: PathBuf,
    pub dgp_summary: PathBuf,
}

impl PipelineOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        let trace = dir.join("dgp_trace.csv");
        Self {
            scenes: dir.join("scenes.jsonl"),
            report: dir.join("mining_report.json"),
            metrics: dir.join("metrics.csv"),
            dgp_summary: summary_path(&trace),
            dgp_trace: trace,
        }
    }
}

/// generate, mine, eval and dgp into `cfg.output_dir`.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<PipelineOutputs, CliError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    let out = PipelineOutputs::in_dir(&cfg.output_dir);
    cmd_generate(cfg, &out.scenes)?;
    cmd_mine(&out.scenes, cfg, &out.report)?;
    cmd_eval(&out.scenes, &out.report, &out.metrics, cfg.good_threshold)?;
    cmd_dgp(cfg, &out.dgp_trace)?;
    Ok(out)
}
