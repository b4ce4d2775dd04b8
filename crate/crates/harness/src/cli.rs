use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use samlab::convergence::{parse_norm_coords, run_convergence_check, ConvergenceConfig, Noise, Problem, TestFn};
use samlab::nn::ForwardMode;
use samlab::perturb::{scope_mask, sparsity_report, Scope};
use samlab::sharpness::{model_sharpness, SharpnessConfig};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::load_dataset;
use crate::error::{Error, Result};
use crate::hist::{param_histograms, write_histograms};
use crate::train::{train, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "samlab", version, about = "Sharpness-aware minimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a training experiment.
    Train(TrainArgs),
    /// Adaptive worst-case sharpness of a checkpoint on its training split.
    Sharpness(SharpnessArgs),
    /// Check the SAM-ON convergence bound on a test function.
    Converge(ConvergeArgs),
    #[command(subcommand)]
    Inspect(InspectCommand),
    #[command(subcommand)]
    Export(ExportCommand),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Debug, Args)]
struct SharpnessArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    rho: f64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 128)]
    m: usize,
    #[arg(long, default_value_t = 2048)]
    subset: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
enum FnName {
    Quadratic,
    LogisticToy,
    SinQuadratic,
}

#[derive(Debug, Args)]
struct ConvergeArgs {
    #[arg(long = "fn", value_enum)]
    function: FnName,
    #[arg(long)]
    h: f64,
    #[arg(long)]
    rho: f64,
    #[arg(long = "T")]
    t: usize,
    /// `all`, `none`, or comma-separated indices.
    #[arg(long, default_value = "all")]
    norm_coords: String,
    /// Curvature of the quadratic.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Enables per-sample gradient noise; also seeds the logistic data.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum InspectCommand {
    /// Print the sparsity report of a perturbation scope.
    Masks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scope: String,
    },
}

#[derive(Debug, Subcommand)]
enum ExportCommand {
    /// Write |w| histograms per parameter tag as CSV.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args` (program name first), execute, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn config_err(e: samlab::Error) -> Error {
    Error::Config(e.to_string())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => {
            let cfg = RunConfig::from_file(&a.config)?;
            let out = a
                .out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
            let outcome = train(
                &cfg,
                &out,
                &TrainOptions {
                    resume: a.resume,
                    stop_after: a.stop_after,
                },
            )?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "epoch {}: train_acc {:.4} test_acc {:.4}",
                    last.epoch, last.train_acc, last.test_acc
                );
            }
            println!("checkpoint {}", outcome.checkpoint.display());
            Ok(())
        }
        Command::Sharpness(a) => {
            let cfg = SharpnessConfig {
                rho: a.rho,
                m: a.m,
                subset_size: a.subset,
                steps: a.steps,
                seed: a.seed,
            };
            cfg.validate().map_err(config_err)?;
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let model = ckpt.model()?;
            let split = load_dataset(&ckpt.run_config.data)?;
            let report = model_sharpness(&model, &split.train.x, &split.train.y, &cfg)?;
            write_json(&report, &a.out)?;
            println!("s_w_m {:.6e} over {} batches", report.s_w_m, report.per_batch.len());
            Ok(())
        }
        Command::Converge(a) => {
            let test_fn = match a.function {
                FnName::Quadratic => TestFn::Quadratic { lambda: a.lambda },
                FnName::LogisticToy => TestFn::LogisticToy {
                    seed: a.seed.unwrap_or(0),
                },
                FnName::SinQuadratic => TestFn::SinQuadratic,
            };
            let dim = Problem::new(test_fn).map_err(config_err)?.dim();
            let cfg = ConvergenceConfig {
                test_fn,
                h: a.h,
                rho: a.rho,
                t: a.t,
                noise: a.seed.map_or(Noise::None, |seed| Noise::PerSample { seed }),
                norm_coords: parse_norm_coords(&a.norm_coords, dim).map_err(config_err)?,
                w0: None,
            };
            let report = run_convergence_check(&cfg).map_err(config_err)?;
            write_json(&report, &a.out)?;
            println!("lhs {:.6e} rhs {:.6e} ratio {:.4}", report.lhs, report.rhs, report.ratio);
            Ok(())
        }
        Command::Inspect(InspectCommand::Masks { checkpoint, scope }) => {
            let scope: Scope = scope.parse().map_err(config_err)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = ckpt.model()?;
            let grads = match scope {
                Scope::FisherTopk { .. } => {
                    let split = load_dataset(&ckpt.run_config.data)?;
                    let eval = model.loss_and_grad(
                        &model.params,
                        &split.train.x,
                        &split.train.y,
                        ForwardMode::Train,
                        ckpt.run_config.label_smoothing,
                        false,
                        None,
                    )?;
                    Some(eval.grad)
                }
                _ => None,
            };
            let mask = scope_mask(&scope, &model.registry, grads.as_deref())?;
            print!("{}", sparsity_report(&mask, &model.registry)?);
            Ok(())
        }
        Command::Export(ExportCommand::Hist { checkpoint, bins, out }) => {
            if bins < 2 {
                return Err(Error::Config(format!("bins must be at least 2, got {bins}")));
            }
            let model = Checkpoint::load(&checkpoint)?.model()?;
            write_histograms(&param_histograms(&model, bins)?, &out)
        }
    }
}
