//! Ablation matrices: every (policy, loss form, weight generator) cell is
//! run once per seed on top of a base config.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vcforge::engine::{LossForm, WeightGen};
use vcforge::pcset::Policy;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::write_atomic;
use crate::run::run_experiment;

pub const THREADS_ENV: &str = "VC_FORGE_THREADS";
pub const TABLE_FILE: &str = "ablation.csv";
pub const TABLE_HEADER: &str =
    "kind,policy,loss_form,weight_gen,seed,n,eval_metric,eval_metric_std,accuracy,accuracy_std,error";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    pub policies: Vec<Policy>,
    pub loss_forms: Vec<LossForm>,
    pub weight_gens: Vec<WeightGen>,
    pub seeds: Vec<u64>,
}

impl AblationMatrix {
    /// VC against the keep and discard baselines, mutual policy, seeds 0..10.
    pub fn strategies() -> Self {
        AblationMatrix {
            policies: vec![Policy::Mutual],
            loss_forms: vec![LossForm::VcCe, LossForm::BaselineKeep, LossForm::BaselineDiscard],
            weight_gens: vec![WeightGen::Normalized],
            seeds: (0..10).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty()
            || self.loss_forms.is_empty()
            || self.weight_gens.is_empty()
            || self.seeds.is_empty()
        {
            return Err(CliError::Config("ablation matrix has an empty axis".into()));
        }
        Ok(())
    }

    /// Cells in policy-major order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &policy in &self.policies {
            for &loss_form in &self.loss_forms {
                for &weight_gen in &self.weight_gens {
                    cells.push(Cell {
                        policy,
                        loss_form,
                        weight_gen,
                    });
                }
            }
        }
        cells
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub policy: Policy,
    pub loss_form: LossForm,
    pub weight_gen: WeightGen,
}

impl Cell {
    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.with_seed(seed);
        cfg.engine.policy.policy = self.policy;
        cfg.engine.loss_form = self.loss_form;
        cfg.engine.weight_gen = self.weight_gen;
        cfg
    }

    fn key(&self) -> [String; 3] {
        [label(&self.policy), label(&self.loss_form), label(&self.weight_gen)]
    }
}

fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => "?".into(),
    }
}

/// Outcome of one (cell, seed) run. A failed run carries its error text.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRun {
    pub cell: Cell,
    pub seed: u64,
    pub result: std::result::Result<(f64, f64), String>,
}

/// Mean and sample standard deviation over the successful seeds of a cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellAggregate {
    pub cell: Cell,
    pub n: usize,
    pub eval_mean: f64,
    pub eval_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<CellRun>,
    pub aggregates: Vec<CellAggregate>,
}

impl AblationReport {
    pub fn aggregate(&self, cell: &Cell) -> Option<&CellAggregate> {
        self.aggregates.iter().find(|a| a.cell == *cell)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(TABLE_HEADER);
        out.push('\n');
        for r in &self.runs {
            let [p, l, w] = r.cell.key();
            match &r.result {
                Ok((e, a)) => {
                    let _ = writeln!(out, "run,{p},{l},{w},{},1,{e},,{a},,", r.seed);
                }
                Err(msg) => {
                    let _ = writeln!(out, "run,{p},{l},{w},{},0,,,,,{}", r.seed, csv_field(msg));
                }
            }
        }
        for a in &self.aggregates {
            let [p, l, w] = a.cell.key();
            let _ = writeln!(
                out,
                "aggregate,{p},{l},{w},,{},{},{},{},{},",
                a.n, a.eval_mean, a.eval_std, a.accuracy_mean, a.accuracy_std
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
}

/// Returns `(mean, sample std)`; the deviation is 0 below two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Thread cap from `VC_FORGE_THREADS`; unset or invalid means rayon's default.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs every cell for every seed. Failures are recorded per run and do not
/// stop the others. With `out`, each run writes its files under
/// `out/runs/<policy>_<form>_<gen>_s<seed>/` and the table goes to
/// `out/ablation.csv`.
pub fn run_ablation(base: &RunConfig, matrix: &AblationMatrix, out: Option<&Path>) -> Result<AblationReport> {
    matrix.validate()?;
    let jobs: Vec<(Cell, u64)> = matrix
        .cells()
        .into_iter()
        .flat_map(|c| matrix.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let work = |&(cell, seed): &(Cell, u64)| {
        let cfg = cell.apply(base, seed);
        let dir = out.map(|o| {
            let [p, l, w] = cell.key();
            o.join("runs").join(format!("{p}_{l}_{w}_s{seed}"))
        });
        let result = run_experiment(&cfg, dir.as_deref())
            .map(|o| (o.summary.final_metrics.eval_metric, o.summary.final_metrics.accuracy))
            .map_err(|e| e.to_string());
        CellRun { cell, seed, result }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let runs: Vec<CellRun> = pool.install(|| jobs.par_iter().map(work).collect());

    let aggregates = matrix
        .cells()
        .into_iter()
        .map(|cell| {
            let ok: Vec<(f64, f64)> = runs
                .iter()
                .filter(|r| r.cell == cell)
                .filter_map(|r| r.result.clone().ok())
                .collect();
            let (eval_mean, eval_std) = mean_std(&ok.iter().map(|x| x.0).collect::<Vec<_>>());
            let (accuracy_mean, accuracy_std) = mean_std(&ok.iter().map(|x| x.1).collect::<Vec<_>>());
            CellAggregate {
                cell,
                n: ok.len(),
                eval_mean,
                eval_std,
                accuracy_mean,
                accuracy_std,
            }
        })
        .collect();
    let report = AblationReport { runs, aggregates };
    if let Some(dir) = out {
        write_atomic(&dir.join(TABLE_FILE), report.to_csv().as_bytes())?;
    }
    Ok(report)
}
