use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;
use vcforge::engine::{LossForm, WeightGen};
use vcforge::pcset::Policy;
use vcforge_cli::ablate::{run_ablation, AblationMatrix, TABLE_FILE, TABLE_HEADER};
use vcforge_cli::run::{read_summary, reproduce, CSV_HEADER, METRICS_FILE, SUMMARY_FILE};
use vcforge_cli::{run_experiment, RunConfig};

fn short(iterations: usize) -> RunConfig {
    RunConfig::from_value(json!({
        "engine": {"iterations": iterations, "burn_in": 10, "eval_every": 10},
        "grid": {"height": 24, "width": 24}
    }))
    .unwrap()
}

fn vcforge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcforge"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn discard_baseline_has_an_all_zero_vc_column() {
    let mut cfg = short(30);
    cfg.engine.loss_form = LossForm::BaselineDiscard;
    let out = run_experiment(&cfg, None).unwrap();
    let csv = out.csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|r| r.len() == 6 && r[2] == "0"));
    assert!(out.steps.iter().any(|m| m.units_kept > 0));
}

#[test]
fn zero_iterations_reports_the_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&short(0), Some(dir.path())).unwrap();
    assert!(out.summary.untrained);
    assert_eq!(out.summary.iterations_run, 0);
    assert_eq!(
        std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(),
        format!("{CSV_HEADER}\n")
    );
    let m = &out.summary.final_metrics;
    assert!((0.0..=1.0).contains(&m.eval_metric) && (0.0..=1.0).contains(&m.accuracy));
}

#[test]
fn summary_round_trips_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(20).with_seed(4);
    let out = run_experiment(&cfg, Some(dir.path())).unwrap();
    let back = read_summary(&dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(back, out.summary);
    assert_eq!(back.config, cfg);
    assert_eq!(back.seed, 4);
    assert_eq!(reproduce(&back).unwrap(), back);

    let mut forged = back.clone();
    forged.final_metrics.accuracy += 0.01;
    assert!(reproduce(&forged).is_err());
}

#[test]
fn step_metrics_stay_in_range() {
    let out = run_experiment(&short(40), None).unwrap();
    for m in &out.steps {
        assert!((0.0..=1.0).contains(&m.confusing_ratio));
        assert!((0.0..=1.0).contains(&m.pseudo_accuracy));
        assert!(m.loss_labelled.is_finite() && m.loss_vc.is_finite());
        assert_eq!(m.eval_metric.is_some(), (m.iter + 1) % 10 == 0);
    }
}

#[test]
fn unwritable_output_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    assert!(run_experiment(&short(5), Some(&file.join("run"))).is_err());
}

#[test]
fn ablation_counts_rows_and_aggregates_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = AblationMatrix {
        seeds: (0..10).collect(),
        ..AblationMatrix::strategies()
    };
    let report = run_ablation(&short(12), &matrix, Some(dir.path())).unwrap();
    assert_eq!(report.runs.len(), 30);
    assert_eq!(report.aggregates.len(), 3);
    for a in &report.aggregates {
        let values: Vec<f64> = report
            .runs
            .iter()
            .filter(|r| r.cell == a.cell)
            .map(|r| r.result.clone().unwrap().1)
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert_eq!(a.n, 10);
        assert!((a.accuracy_mean - mean).abs() < 1e-12);
    }
    let table = std::fs::read_to_string(dir.path().join(TABLE_FILE)).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some(TABLE_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.iter().filter(|l| l.starts_with("run,")).count(), 30);
    assert_eq!(rows.iter().filter(|l| l.starts_with("aggregate,")).count(), 3);
    assert!(dir
        .path()
        .join("runs/mutual_vc-ce_normalized_s3")
        .join(METRICS_FILE)
        .exists());
}

#[test]
fn ablation_records_failures_per_cell_and_continues() {
    let base = RunConfig::from_value(json!({
        "task": "scene-det",
        "engine": {"iterations": 4, "burn_in": 2},
        "scene": {"labelled_scenes": 2, "unlabelled_scenes": 4, "test_scenes": 2}
    }))
    .unwrap();
    let matrix = AblationMatrix {
        policies: vec![Policy::Top2, Policy::Temporal],
        loss_forms: vec![LossForm::VcCe],
        weight_gens: vec![WeightGen::Normalized],
        seeds: vec![0, 1],
    };
    let report = run_ablation(&base, &matrix, None).unwrap();
    let (bad, good): (Vec<_>, Vec<_>) = report.runs.iter().partition(|r| r.cell.policy == Policy::Top2);
    assert!(bad.iter().all(|r| r.result.is_err()));
    assert!(good.iter().all(|r| r.result.is_ok()));
    assert_eq!(report.aggregates[0].n, 0);
    assert_eq!(report.aggregates[1].n, 2);
    assert!(report.to_csv().contains("top-2"));
}

#[test]
fn binary_train_eval_and_gen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"engine": {"iterations": 15, "burn_in": 5}, "grid": {"height": 16, "width": 16}}"#,
    )
    .unwrap();
    let train = vcforge(
        &[
            "train",
            "--config",
            "cfg.json",
            "--seed",
            "2",
            "--out",
            "run",
            "--override",
            "engine.loss_form=neg",
        ],
        dir.path(),
    );
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let summary = read_summary(&dir.path().join("run").join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.config.engine.loss_form, LossForm::Neg);
    assert_eq!(summary.config.engine.seed, 2);

    let eval = vcforge(&["eval", "run"], dir.path());
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));

    let gen = vcforge(&["gen", "--config", "cfg.json", "--out", "data"], dir.path());
    assert!(gen.status.success());
    let lines = std::fs::read_to_string(dir.path().join("data/dataset.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(lines, 2 * 16 * 16);
}

#[test]
fn binary_rejects_bad_input_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("typo.json"), r#"{"engine": {"iteratons": 5}}"#).unwrap();
    let typo = vcforge(&["train", "--config", "typo.json", "--out", "run"], dir.path());
    assert!(!typo.status.success());
    assert!(String::from_utf8_lossy(&typo.stderr).contains("iteratons"));
    let no_out = vcforge(&["train"], dir.path());
    assert!(!no_out.status.success());
    let bad_value = vcforge(
        &["train", "--out", "r", "--override", "engine.thresholds.t=2"],
        dir.path(),
    );
    assert!(!bad_value.status.success());
}

#[test]
fn binary_gradcheck_reports_every_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = vcforge(&["gradcheck", "--cases", "5", "--out", "."], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for form in ["vc-ce", "vc-ce-focal", "vc-mse", "neg", "cosine", "generator"] {
        assert!(text.contains(form), "{text}");
    }
    assert!(dir.path().join("gradcheck.json").exists());
}
