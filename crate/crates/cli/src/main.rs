//! `mtp`: train, evaluate and inspect receptor-aware ligand models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtp::data::Split;
use mtp::gradcheck::GradcheckCase;
use mtp::Error;

use crate::commands::{EvalArgs, ExportArgs, TrainArgs};
use crate::config::{output_dir, parse_split, ModelOverrides, RunConfig, TrainOverrides, OUTPUT_ENV};

#[derive(Parser, Debug)]
#[command(name = "mtp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write config.resolved, metrics.log and checkpoint.bin.
    Train {
        /// TOML file with [model], [train] and [paths] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides [paths].manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, env = OUTPUT_ENV)]
        output_dir: Option<PathBuf>,
        /// No per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        model: ModelOverrides,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Score a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// train | test
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Refuse the checkpoint unless it matches this run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        model: ModelOverrides,
        #[arg(long, env = OUTPUT_ENV)]
        output_dir: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients for every parameter block.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Atoms.
        #[arg(long, default_value_t = 4)]
        m: usize,
        /// Residues.
        #[arg(long, default_value_t = 6)]
        n: usize,
        /// Pocket size.
        #[arg(long, default_value_t = 3)]
        p: usize,
        #[arg(long, default_value_t = 5)]
        d_mol: usize,
        #[arg(long, default_value_t = 6)]
        d_pro: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        model: ModelOverrides,
        /// Perturb the analytic gradient of this block (negative control).
        #[arg(long, hide = true)]
        corrupt_block: Option<String>,
    },
    /// Write per-atom attention scores and raw attention maps for samples.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Sample id; repeat for several.
        #[arg(long = "sample", required = true, num_args = 1..)]
        samples: Vec<String>,
        #[arg(long, env = OUTPUT_ENV)]
        output_dir: Option<PathBuf>,
    },
    /// Generate a synthetic receptor-conditioned dataset.
    SynthData {
        /// TOML dataset spec.
        #[arg(long)]
        spec: PathBuf,
        /// Dataset directory; defaults to <output-dir>/data.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = OUTPUT_ENV)]
        output_dir: Option<PathBuf>,
    },
}

/// Smaller model than the training default, sized for a quick check.
fn gradcheck_defaults() -> mtp::model::MtpConfig {
    mtp::model::MtpConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_hidden: 8,
        dropout_p: 0.0,
        ..Default::default()
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train {
            config,
            manifest,
            output_dir,
            quiet,
            model,
            train,
        } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            model.apply(&mut cfg.model);
            train.apply(&mut cfg.train);
            if manifest.is_some() {
                cfg.paths.manifest = manifest;
            }
            commands::cmd_train(TrainArgs {
                config: cfg,
                output: output_dir,
                quiet,
            })?;
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            config,
            model,
            output_dir,
        } => {
            let expected = match config {
                Some(p) => {
                    let mut cfg = RunConfig::load(&p)?;
                    model.apply(&mut cfg.model);
                    Some(cfg)
                }
                None => None,
            };
            commands::cmd_eval(EvalArgs {
                checkpoint,
                manifest,
                split,
                expected,
                output: output_dir,
            })?;
        }
        Command::Gradcheck {
            config,
            m,
            n,
            p,
            d_mol,
            d_pro,
            seed,
            model,
            corrupt_block,
        } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?.model,
                None => gradcheck_defaults(),
            };
            model.apply(&mut cfg);
            let case = GradcheckCase {
                config: cfg,
                m,
                n,
                p,
                d_mol,
                d_pro,
                seed,
            };
            return Ok(commands::cmd_gradcheck(&case, corrupt_block.as_deref())?.passed());
        }
        Command::ExportAttention {
            checkpoint,
            manifest,
            samples,
            output_dir,
        } => {
            commands::cmd_export_attention(ExportArgs {
                checkpoint,
                manifest,
                samples,
                output: output_dir,
            })?;
        }
        Command::SynthData { spec, out, output_dir: od } => {
            let out = out.unwrap_or_else(|| output_dir(od.as_deref(), &RunConfig::default()).join("data"));
            commands::cmd_synth_data(&spec, &out)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
