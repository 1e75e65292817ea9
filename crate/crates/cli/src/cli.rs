use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::commands::{self, PretrainArgs};
use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "co2", version, about = "Contrastive pretraining with a consistency term")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML experiment configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seeds data generation, training, encoder init and fine-tuning.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted-key override, e.g. `--set train.alpha=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

impl Common {
    fn resolve(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        overrides.extend_from_slice(extra);
        ExperimentConfig::resolve(self.config.as_deref(), &overrides, self.seed)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset described by `[data]`.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder; writes checkpoint, metrics and manifest.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset file; the `[data]` section is synthesized when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set train.alpha=A`; 0 gives the MoCo baseline.
        #[arg(long)]
        alpha: Option<f64>,
        /// Continue from `OUT/checkpoint.bin` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Linear probe on frozen features.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Checkpoint or parameter file; probes raw inputs when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the report to `OUT/probe.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the whole encoder on a labelled subset.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the report to `OUT/finetune.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain and probe over an alpha x tau_con grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated alpha values (overrides `sweep.alpha`).
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        /// Comma-separated tau_con values (overrides `sweep.tau_con`).
        #[arg(long, value_delimiter = ',')]
        tau_con: Option<Vec<f64>>,
        /// Concurrent cells, capped by CO2_THREADS.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Merge metrics files into a long-format CSV.
    Curves {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare MoCo, MoCo with label smoothing, and MoCo with the consistency term.
    AblateSmoothing {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emit(value: &impl Serialize, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn save_report(dir: Option<&Path>, name: &str, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = serde_json::to_string_pretty(value)? + "\n";
        std::fs::write(dir.join(name), text).with_context(|| format!("writing {name}"))?;
    }
    Ok(())
}

/// Runs one parsed command, printing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Generate { common, out: dir } => {
            let cfg = common.resolve(&[])?;
            emit(&commands::generate(&cfg, &dir)?, out)
        }
        Command::Pretrain {
            common,
            data,
            out: dir,
            alpha,
            resume,
        } => {
            let extra: Vec<String> = alpha.map(|a| format!("train.alpha={a:?}")).into_iter().collect();
            let cfg = common.resolve(&extra)?;
            let report = commands::pretrain(
                &cfg,
                &PretrainArgs {
                    config_path: common.config.as_deref(),
                    data: data.as_deref(),
                    out_dir: &dir,
                    resume,
                },
            )?;
            emit(&report, out)
        }
        Command::Probe {
            common,
            checkpoint,
            data,
            out: dir,
        } => {
            let cfg = common.resolve(&[])?;
            let report = commands::probe(&cfg, checkpoint.as_deref(), data.as_deref())?;
            save_report(dir.as_deref(), "probe.json", &report)?;
            emit(&report, out)
        }
        Command::Finetune {
            common,
            checkpoint,
            data,
            out: dir,
        } => {
            let cfg = common.resolve(&[])?;
            let report = commands::finetune(&cfg, &checkpoint, data.as_deref())?;
            save_report(dir.as_deref(), "finetune.json", &report)?;
            emit(&report, out)
        }
        Command::Sweep {
            common,
            data,
            out: dir,
            alpha,
            tau_con,
            parallel,
        } => {
            let mut cfg = common.resolve(&[])?;
            if let Some(a) = alpha {
                cfg.sweep.alpha = a;
            }
            if let Some(t) = tau_con {
                cfg.sweep.tau_con = t;
            }
            let cells = commands::sweep(&cfg, data.as_deref(), &dir, parallel)?;
            write!(out, "{}", commands::grid_csv(&cells))?;
            Ok(())
        }
        Command::Curves { metrics, out: file } => {
            let csv = commands::curves(&metrics)?;
            match file {
                Some(f) => std::fs::write(&f, csv).with_context(|| format!("writing {}", f.display()))?,
                None => write!(out, "{csv}")?,
            }
            Ok(())
        }
        Command::AblateSmoothing {
            common,
            eps,
            data,
            out: dir,
        } => {
            let cfg = common.resolve(&[])?;
            emit(&commands::ablate_smoothing(&cfg, eps, data.as_deref(), &dir)?, out)
        }
    }
}
