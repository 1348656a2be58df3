use std::path::Path;
use std::process::Command;

use bevmine_cli::commands::{self, summary_path};
use bevmine_cli::config::ProjectionMode;
use bevmine_cli::report::{self, MetricRow, MiningReport, SummaryRow, TraceRow};
use bevmine_cli::{scene_io, CliError, RunConfig};
use bevmine_core::eval::{self, ConflictPair};
use bevmine_core::gradproj::{ConflictReport, StepRecord};
use bevmine_core::{mining, synth, NoiseModel, SceneSpec};

fn small_config(count: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scene.count = count;
    cfg.harness.seeds = vec![0, 1];
    cfg.harness.toy.steps = 40;
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bevmine"))
}

fn stderr_kind(out: &std::process::Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn generate_then_parse_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let cfg = small_config(3);
    let generated = commands::cmd_generate(&cfg, &path).unwrap();
    let parsed = scene_io::read_scene_file(&path).unwrap();
    assert_eq!(parsed, generated);
    assert_eq!(parsed.len(), 3);
    for (i, s) in parsed.iter().enumerate() {
        assert_eq!(s.provenance.seed, i as u64);
        assert_eq!(s.provenance.spec_hash, cfg.scene.spec(i).unwrap().hash());
    }
    // Rewriting the parsed scenes with their specs reproduces the file.
    let specs: Vec<SceneSpec> = (0..3).map(|i| cfg.scene.spec(i).unwrap()).collect();
    let again = dir.path().join("again.jsonl");
    scene_io::write_scene_file(&again, &parsed, Some(&specs)).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn records_alternate_after_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    commands::cmd_generate(&small_config(1), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["format_version"], 1);
    assert_eq!(lines[0]["rig"]["R"].as_array().unwrap().len(), 9);
    assert_eq!(lines[0]["rig"]["T"].as_array().unwrap().len(), 3);
    assert_eq!(lines.len(), 1 + 2 * 12);
    for (k, l) in lines[1..].iter().enumerate() {
        let key = if k % 2 == 0 { "box" } else { "det" };
        assert!(l.get(key).is_some(), "line {} should be {key}", k + 2);
    }
    assert_eq!(lines[2]["det"]["kp"].as_array().unwrap().len(), 5);
}

#[test]
fn zero_objects_write_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let mut cfg = small_config(1);
    cfg.scene.n_objects = 0;
    commands::cmd_generate(&cfg, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
    let scenes = scene_io::read_scene_file(&path).unwrap();
    assert!(scenes[0].boxes.is_empty() && scenes[0].detections.is_empty());
}

#[test]
fn version_two_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    commands::cmd_generate(&small_config(1), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"format_version\":1", "\"format_version\":2", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(scene_io::read_scene_file(&path), Err(CliError::UnsupportedVersion(2))));

    let out = bin()
        .args(["mine", "--scenes"])
        .arg(&path)
        .arg("--report")
        .arg(dir.path().join("r.json"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_eq!(stderr_kind(&out), "UnsupportedVersion");
}

#[test]
fn zero_noise_scene_selects_everything() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("s.jsonl");
    let report_path = dir.path().join("r.json");
    let mut cfg = small_config(2);
    cfg.noise = NoiseModel::noiseless();
    commands::cmd_generate(&cfg, &scenes).unwrap();
    let report = commands::cmd_mine(&scenes, &cfg, &report_path).unwrap();
    for (s, r) in scene_io::read_scene_file(&scenes).unwrap().iter().zip(&report.scenes) {
        assert!(!r.fallback);
        assert_eq!(r.labels_3d, (0..s.detections.len()).collect::<Vec<_>>());
        // Same answer as calling the miner directly.
        let direct = mining::decoupled_generate(&s.detections, &s.rig, &cfg.mining);
        assert_eq!(r.labels_3d, direct.labels_3d);
        assert_eq!(r.iterations_used, direct.iterations_used);
        for it in &r.iterations {
            let norm: f64 = it.homography.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(MiningReport::read(&report_path).unwrap(), report);
}

#[test]
fn single_detection_falls_back_to_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("s.jsonl");
    let mut cfg = small_config(1);
    cfg.scene.n_objects = 1;
    cfg.noise = NoiseModel::noiseless();
    commands::cmd_generate(&cfg, &scenes).unwrap();
    let report = commands::cmd_mine(&scenes, &cfg, &dir.path().join("r.json")).unwrap();
    let r = &report.scenes[0];
    assert!(r.fallback);
    assert!(r.fallback_reason.is_some());
    assert_eq!(r.labels_3d, r.seed_set);
    assert_eq!(r.iterations_used, 0);
}

#[test]
fn degenerate_scene_does_not_abort_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(1);
    let mut scenes = Vec::new();
    for n in [1, 12] {
        let spec = SceneSpec { n_objects: n, ..SceneSpec::default() };
        scenes.push(synth::corrupt(&synth::generate_scene(&spec).unwrap(), &NoiseModel::noiseless(), 0).unwrap());
    }
    let path = dir.path().join("s.jsonl");
    scene_io::write_scene_file(&path, &scenes, None).unwrap();
    let report = commands::cmd_mine(&path, &cfg, &dir.path().join("r.json")).unwrap();
    assert!(report.scenes[0].fallback);
    assert!(!report.scenes[1].fallback);
    assert_eq!(report.scenes[1].labels_3d.len(), 12);
}

#[test]
fn mining_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("s.jsonl");
    let cfg = small_config(4);
    commands::cmd_generate(&cfg, &scenes).unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    commands::cmd_mine(&scenes, &cfg, &a).unwrap();
    commands::cmd_mine(&scenes, &cfg, &b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

fn rows(path: &Path) -> Vec<MetricRow> {
    report::read_csv(path).unwrap()
}

fn value(rows: &[MetricRow], name: &str) -> (f64, usize) {
    let r = rows.iter().find(|r| r.metric == name).unwrap_or_else(|| panic!("no {name}"));
    (r.value, r.n)
}

#[test]
fn eval_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, rep, csv) = (dir.path().join("s.jsonl"), dir.path().join("r.json"), dir.path().join("m.csv"));
    let cfg = small_config(3);
    commands::cmd_generate(&cfg, &scenes).unwrap();
    commands::cmd_mine(&scenes, &cfg, &rep).unwrap();
    let out = commands::cmd_eval(&scenes, &rep, &csv, cfg.good_threshold).unwrap();
    assert_eq!(rows(&csv), out);
    let header = std::fs::read_to_string(&csv).unwrap();
    assert!(header.starts_with("metric,value,n\n"));
    for name in ["precision", "recall", "mean_loc_err_gt", "mean_loc_err_det"] {
        let (v, n) = value(&out, name);
        assert!(v.is_finite() && n > 0, "{name}");
    }
    let (p, _) = value(&out, "precision");
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn eval_rejects_out_of_range_indices() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, rep) = (dir.path().join("s.jsonl"), dir.path().join("r.json"));
    let mut cfg = small_config(1);
    cfg.scene.n_objects = 10;
    commands::cmd_generate(&cfg, &scenes).unwrap();
    let mut report = commands::cmd_mine(&scenes, &cfg, &rep).unwrap();
    report.scenes[0].labels_3d.push(99);
    report.write(&rep).unwrap();
    let err = commands::cmd_eval(&scenes, &rep, &dir.path().join("m.csv"), 1.0).unwrap_err();
    assert!(matches!(err, CliError::MismatchedInputs(_)), "{err}");

    let out = bin()
        .args(["eval", "--scenes"])
        .arg(&scenes)
        .arg("--report")
        .arg(&rep)
        .arg("--out")
        .arg(dir.path().join("m.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_kind(&out), "MismatchedInputs");
}

#[test]
fn eval_on_an_empty_scene_uses_conventions() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, rep, csv) = (dir.path().join("s.jsonl"), dir.path().join("r.json"), dir.path().join("m.csv"));
    let mut cfg = small_config(1);
    cfg.scene.n_objects = 0;
    commands::cmd_generate(&cfg, &scenes).unwrap();
    commands::cmd_mine(&scenes, &cfg, &rep).unwrap();
    let out = commands::cmd_eval(&scenes, &rep, &csv, 1.0).unwrap();
    assert_eq!(value(&out, "precision"), (1.0, 0));
    assert_eq!(value(&out, "recall"), (1.0, 0));
    assert_eq!(value(&out, "mean_loc_err_det"), (0.0, 0));
    assert_eq!(value(&out, "pcc_score_depth_err"), (0.0, 0));
}

#[test]
fn dgp_both_modes_and_cross_check() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("trace.csv");
    let mut cfg = small_config(1);
    cfg.harness.seeds = vec![0];
    cfg.harness.projection = ProjectionMode::Both;
    let reports = commands::cmd_dgp(&cfg, &csv).unwrap();
    assert_eq!(reports.len(), 2);
    let summary: Vec<SummaryRow> = report::read_csv(&summary_path(&csv)).unwrap();
    assert_eq!(summary.len(), 2);
    assert_eq!((summary[0].projection, summary[1].projection), (true, false));

    // Rebuild each run from the trace CSV and recompute its conflict fractions.
    let trace: Vec<TraceRow> = report::read_csv(&csv).unwrap();
    assert_eq!(trace.len(), 2 * cfg.harness.toy.steps);
    for row in &summary {
        let steps: Vec<StepRecord> = trace
            .iter()
            .filter(|t| t.seed == row.seed && t.projection == row.projection)
            .map(|t| StepRecord {
                step: t.step,
                cos_ud_p: t.cos_ud_p,
                cos_ud_sd: t.cos_ud_sd,
                cos_ud_o: t.cos_ud_o,
                cos_sd_o: t.cos_sd_o,
                loss_sd: t.loss_sd,
                loss_ud: t.loss_ud,
                loss_o: t.loss_o,
                applied_ud_cos: 0.0,
            })
            .collect();
        let rebuilt = ConflictReport {
            seed: row.seed,
            projection: row.projection,
            steps,
            final_loss_sd: row.final_loss_sd,
            final_loss_ud: row.final_loss_ud,
            final_loss_o: row.final_loss_o,
        };
        let f = eval::conflict_proportions(&rebuilt);
        assert_eq!(f[&ConflictPair::UdSd], row.conflict_ud_sd);
        assert_eq!(f[&ConflictPair::UdO], row.conflict_ud_o);
        assert_eq!(f[&ConflictPair::SdO], row.conflict_sd_o);
        assert_eq!(f[&ConflictPair::UdP], row.conflict_ud_p);
    }

    let again = dir.path().join("again.csv");
    commands::cmd_dgp(&cfg, &again).unwrap();
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(
        std::fs::read(summary_path(&csv)).unwrap(),
        std::fs::read(summary_path(&again)).unwrap()
    );
}

#[test]
fn dgp_rejects_invalid_harness() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(1);
    cfg.harness.toy.lr = -1.0;
    let err = commands::cmd_dgp(&cfg, &dir.path().join("t.csv")).unwrap_err();
    assert!(matches!(err, CliError::InvalidConfig(_)));
}

#[test]
fn binary_reports_config_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, "[mining]\ntheta_h = -1.0\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(&cfg_path)
        .args(["generate", "--out"])
        .arg(dir.path().join("s.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_kind(&out), "InvalidConfig");

    let out = bin()
        .args(["mine", "--scenes", "/nonexistent/s.jsonl", "--report"])
        .arg(dir.path().join("r.json"))
        .output()
        .unwrap();
    assert_eq!(stderr_kind(&out), "IoError");

    let out = bin()
        .args(["dgp", "--out"])
        .arg(dir.path().join("t.csv"))
        .env("BEVMINE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(stderr_kind(&out), "InvalidConfig");

    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_kind(&out), "UsageError");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(
        &cfg_path,
        "[scene]\ncount = 1\nn_objects = 6\n[harness]\nseeds = [0]\nsteps = 5\nprojection = \"on\"\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let status = bin()
        .arg("--config")
        .arg(&cfg_path)
        .args(["--theta-h", "0.5", "--t-max", "3", "--seed", "11", "pipeline", "--output-dir"])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let report = MiningReport::read(&out_dir.join("mining_report.json")).unwrap();
    assert_eq!(report.config.theta_h, 0.5);
    assert_eq!(report.config.t_max, 3);
    assert_eq!(report.scenes[0].seed, 11);
    assert!(report.scenes[0].iterations_used <= 3);
    let summary: Vec<SummaryRow> = report::read_csv(&out_dir.join("dgp_trace_summary.csv")).unwrap();
    assert_eq!(summary.len(), 1);
}
