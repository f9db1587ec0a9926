//! Single training runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vcforge::engine::{DetTrainer, SegTrainer, StepMetrics};
use vcforge::synthdata::{gen_grid, gen_scene};

use crate::config::{RunConfig, Task};
use crate::error::{CliError, Result};
use crate::io::write_atomic;

pub const CSV_HEADER: &str = "iter,loss_l,loss_vc,confusing_ratio,pseudo_acc,eval_metric";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Test-split evaluation of the final student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalMetrics {
    /// `miou` for grid-seg, `map50` for scene-det.
    pub metric: String,
    pub eval_metric: f64,
    /// Per-unit classification accuracy (pixels or proposals).
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub seed: u64,
    pub iterations_run: usize,
    /// True when no training step ran, so `final_metrics` is the untrained model.
    pub untrained: bool,
    pub final_metrics: FinalMetrics,
    pub config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub steps: Vec<StepMetrics>,
}

impl RunOutcome {
    pub fn csv(&self) -> String {
        metrics_csv(&self.steps)
    }
}

/// One row per step; `eval_metric` is empty on steps without evaluation.
/// Floats use the shortest representation that parses back exactly.
pub fn metrics_csv(steps: &[StepMetrics]) -> String {
    let mut out = String::with_capacity(64 * (steps.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for m in steps {
        let _ = write!(
            out,
            "{},{},{},{},{},",
            m.iter, m.loss_labelled, m.loss_vc, m.confusing_ratio, m.pseudo_accuracy
        );
        if let Some(e) = m.eval_metric {
            let _ = write!(out, "{e}");
        }
        out.push('\n');
    }
    out
}

/// Trains to completion, evaluates, and writes `metrics.csv` and
/// `summary.json` into `out` when given. The output directory is created
/// before training so an unwritable path fails fast.
pub fn run_experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut steps = Vec::with_capacity(cfg.engine.iterations);
    let sink = |m: &StepMetrics| {
        steps.push(m.clone());
        Ok(())
    };
    let final_metrics = match cfg.task {
        Task::GridSeg => {
            let spec = cfg.grid.as_ref().expect("validated grid spec");
            let mut trainer = SegTrainer::new(cfg.engine.clone(), gen_grid(spec)?)?;
            let eval = trainer.run(sink)?;
            FinalMetrics {
                metric: "miou".into(),
                eval_metric: eval.miou,
                accuracy: eval.accuracy,
            }
        }
        Task::SceneDet => {
            let spec = cfg.scene.as_ref().expect("validated scene spec");
            let mut trainer = DetTrainer::new(cfg.engine.clone(), gen_scene(spec)?)?;
            let eval = trainer.run(sink)?;
            FinalMetrics {
                metric: "map50".into(),
                eval_metric: eval.map50,
                accuracy: eval.accuracy,
            }
        }
    };
    let outcome = RunOutcome {
        summary: RunSummary {
            seed: cfg.seed,
            iterations_run: steps.len(),
            untrained: steps.is_empty(),
            final_metrics,
            config: cfg.clone(),
        },
        steps,
    };
    if let Some(dir) = out {
        write_atomic(&dir.join(METRICS_FILE), outcome.csv().as_bytes())?;
        let mut json = serde_json::to_vec_pretty(&outcome.summary)?;
        json.push(b'\n');
        write_atomic(&dir.join(SUMMARY_FILE), &json)?;
    }
    Ok(outcome)
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Re-executes the run recorded in a summary and checks that the final
/// metrics reproduce bit for bit. Returns the fresh summary.
pub fn reproduce(summary: &RunSummary) -> Result<RunSummary> {
    let fresh = run_experiment(&summary.config, None)?.summary;
    if fresh.final_metrics != summary.final_metrics {
        return Err(CliError::Mismatch(format!(
            "recorded {:?}, reproduced {:?}",
            summary.final_metrics, fresh.final_metrics
        )));
    }
    Ok(fresh)
}
