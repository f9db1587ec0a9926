use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vcforge_cli::ablate::{run_ablation, AblationMatrix};
use vcforge_cli::data::write_dataset;
use vcforge_cli::gradcheck::{gradcheck_suite, GradcheckConfig};
use vcforge_cli::io::write_atomic;
use vcforge_cli::run::{read_summary, reproduce, run_experiment, SUMMARY_FILE};
use vcforge_cli::RunConfig;

#[derive(Parser)]
#[command(
    name = "vcforge",
    version,
    about = "Virtual-category semi-supervised training on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; missing keys take the task defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data and engine; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `dotted.key=value`, applied in order. Values are JSON or bare strings.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), self.seed, &self.overrides)?)
    }

    fn out_dir(&self, cfg: &RunConfig) -> Result<PathBuf> {
        self.out
            .clone()
            .or_else(|| cfg.output.clone())
            .context("no output directory: pass --out or set `output` in the config")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the task's dataset as line-delimited JSON.
    Gen(Common),
    /// Train one run; writes metrics.csv and summary.json.
    Train(Common),
    /// Run a policy x loss-form x weight-generator matrix over seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// JSON matrix with `policies`, `loss_forms`, `weight_gens`, `seeds`.
        /// Defaults to VC vs keep vs discard over seeds 0..10. `--seed s`
        /// shifts the seed list to start at `s`.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Finite-difference check of every loss form; non-zero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        cases: usize,
        /// Also write the report as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the config recorded in a summary and verify its final metrics.
    Eval {
        /// A summary.json, or a run directory containing one.
        summary: PathBuf,
    },
}

fn summary_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(SUMMARY_FILE)
    } else {
        p.to_path_buf()
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(common) => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg)?;
            let n = write_dataset(&cfg, &out)?;
            println!("wrote {n} records to {}", out.display());
        }
        Command::Train(common) => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg)?;
            let outcome = run_experiment(&cfg, Some(&out))?;
            println!("{}", serde_json::to_string(&outcome.summary.final_metrics)?);
        }
        Command::Ablate { common, matrix } => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg)?;
            let mut m = match matrix {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| p.display().to_string())?;
                    serde_json::from_str(&text).with_context(|| format!("matrix {}", p.display()))?
                }
                None => AblationMatrix::strategies(),
            };
            if let Some(s) = common.seed {
                m.seeds = (0..m.seeds.len() as u64).map(|i| s + i).collect();
            }
            let report = run_ablation(&cfg, &m, Some(&out))?;
            for a in &report.aggregates {
                println!(
                    "{:?}/{:?}/{:?}: n={} metric {:.4} +- {:.4}, accuracy {:.4} +- {:.4}",
                    a.cell.policy,
                    a.cell.loss_form,
                    a.cell.weight_gen,
                    a.n,
                    a.eval_mean,
                    a.eval_std,
                    a.accuracy_mean,
                    a.accuracy_std
                );
            }
            let failed = report.runs.iter().filter(|r| r.result.is_err()).count();
            if failed > 0 {
                bail!("{failed} of {} runs failed; see ablation.csv", report.runs.len());
            }
        }
        Command::Gradcheck { seed, cases, out } => {
            let report = gradcheck_suite(&GradcheckConfig {
                seed,
                cases_per_form: cases,
                ..GradcheckConfig::default()
            });
            println!("{report}");
            if let Some(dir) = out {
                write_atomic(&dir.join("gradcheck.json"), &serde_json::to_vec_pretty(&report)?)?;
            }
            if !report.is_ok() {
                for f in &report.failures {
                    eprintln!("{} case {}: {}", f.form, f.case, f.detail);
                }
                bail!("{} gradient check failures", report.failures.len());
            }
        }
        Command::Eval { summary } => {
            let path = summary_path(&summary);
            let recorded = read_summary(&path)?;
            let fresh = reproduce(&recorded)?;
            println!("{}", serde_json::to_string(&fresh.final_metrics)?);
        }
    }
    Ok(())
}
