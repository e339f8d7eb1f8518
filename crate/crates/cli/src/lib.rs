//! `ductms` command-line front end.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use ductms::physics::DoseLevel;
use ductms::training::dataset::Split;
use ductms::training::Variant;
use ductms::CoreError;

use commands::{ReconMode, ReconOptions, TrainOptions};
use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ductms", version, about = "Dose-prompted dual-domain CT metal artifact reduction")]
pub struct Cli {
    /// JSON run configuration; built-in defaults when omitted
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (relative paths resolve against the workspace root)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its manifest
    Simulate {
        /// Comma-separated dose labels (half, quarter, eighth)
        #[arg(long, value_delimiter = ',')]
        dose: Option<Vec<String>>,
    },
    /// Train a model variant
    Train {
        /// prompted, blind, per-dose or image-only
        #[arg(long)]
        variant: Option<String>,
        /// Number of unfolded stages
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many epochs; continue later with --resume
        #[arg(long)]
        until: Option<usize>,
        /// Continue from the checkpoint and state in the output directory
        #[arg(long)]
        resume: bool,
        /// Dataset directory (defaults to io.data_dir)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruct a dataset split or a single sinogram
    Reconstruct {
        /// Dataset directory or sinogram array stem
        #[arg(long)]
        input: Option<PathBuf>,
        /// learned, classical or fbp
        #[arg(long, default_value = "learned")]
        mode: String,
        /// Model file or training output directory
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        stages: Option<usize>,
        /// Dose label of a single-sinogram input
        #[arg(long)]
        dose: Option<String>,
        /// Dataset split to reconstruct: test or train
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Tabulate PSNR/SSIM/RMSE per dose and metal-size bin
    Evaluate {
        /// Reconstruction directory
        #[arg(long)]
        pred: PathBuf,
        /// Reference dataset directory (defaults to io.data_dir)
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Train several variants on one dataset and compare them
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "prompted,blind")]
        variants: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split, CoreError> {
    match s {
        "test" => Ok(Split::Test),
        "train" => Ok(Split::Train),
        _ => Err(CoreError::Usage(format!("unknown split '{}' (expected test or train)", s))),
    }
}

/// Loads the config named on the command line and applies global overrides.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CoreError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = |default: PathBuf| cfg_out(&cli, default);
    let resolve = |c: &RunConfig, p: &Option<PathBuf>, d: &PathBuf| c.resolve(p.as_ref().unwrap_or(d));
    match &cli.command {
        Command::Simulate { dose } => {
            if let Some(d) = dose {
                cfg.dose.levels = d.clone();
                cfg.validate()?;
            }
            let dir = cfg.resolve(&out(cfg.io.data_dir.clone()));
            commands::simulate(&cfg, &dir)?;
        }
        Command::Train {
            variant,
            stages,
            epochs,
            until,
            resume,
            data,
        } => {
            let variant = variant.as_deref().map(Variant::parse).transpose()?;
            let v = variant.unwrap_or(cfg.variant());
            let dir = cfg.resolve(&out(cfg.io.out_dir.join("train").join(v.label())));
            let opts = TrainOptions {
                variant,
                stages: *stages,
                epochs: *epochs,
                until: *until,
                resume: *resume,
            };
            let s = commands::train(&cfg, &resolve(&cfg, data, &cfg.io.data_dir), &dir, &opts)?;
            for m in &s.models {
                println!(
                    "{} {}: {} params, {} bytes, val PSNR {}",
                    s.variant.label(),
                    m.dose.map(|d| d.label()).unwrap_or("all doses"),
                    m.params,
                    m.bytes,
                    m.val.map(|v| report::num(v.psnr)).unwrap_or_else(|| "n/a".into())
                );
            }
        }
        Command::Reconstruct {
            input,
            mode,
            checkpoint,
            variant,
            stages,
            dose,
            split,
        } => {
            let mode = ReconMode::parse(mode)?;
            let opts = ReconOptions {
                checkpoint: checkpoint.as_ref().map(|p| cfg.resolve(p)),
                variant: variant.as_deref().map(Variant::parse).transpose()?,
                stages: *stages,
                dose: dose.as_deref().map(DoseLevel::parse).transpose()?,
                split: Some(parse_split(split)?),
            };
            let input = resolve(&cfg, input, &cfg.io.data_dir);
            let dir = cfg.resolve(&out(cfg.io.out_dir.join("recon").join(mode.label())));
            let n = commands::reconstruct(&cfg, &input, &dir, mode, &opts)?;
            println!("reconstructed {} input(s) into {}", n, dir.display());
        }
        Command::Evaluate { pred, gt } => {
            let dir = cfg.resolve(&out(cfg.io.out_dir.join("eval")));
            commands::evaluate(&cfg.resolve(pred), &resolve(&cfg, gt, &cfg.io.data_dir), &dir)?;
        }
        Command::Ablate { variants, epochs, data } => {
            let variants = variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>, _>>()?;
            let dir = cfg.resolve(&out(cfg.io.out_dir.join("ablation")));
            commands::ablate(&cfg, &resolve(&cfg, data, &cfg.io.data_dir), &dir, &variants, *epochs)?;
        }
    }
    Ok(())
}

fn cfg_out(cli: &Cli, default: PathBuf) -> PathBuf {
    cli.out.clone().unwrap_or(default)
}

/// Process exit code for an error: 2 for configuration and usage errors,
/// 3 for numeric failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) | CoreError::Usage(_) => EXIT_CONFIG,
                e if e.is_numeric() => EXIT_NUMERIC,
                _ => EXIT_FAILURE,
            };
        }
        if let Some(tensor::TensorError::NonFinite { .. }) = cause.downcast_ref::<tensor::TensorError>() {
            return EXIT_NUMERIC;
        }
    }
    EXIT_FAILURE
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let e = |c: CoreError| exit_code(&anyhow::Error::from(c));
        assert_eq!(e(CoreError::Config("x".into())), EXIT_CONFIG);
        assert_eq!(e(CoreError::Usage("x".into())), EXIT_CONFIG);
        assert_eq!(e(CoreError::Numeric("x".into())), EXIT_NUMERIC);
        assert_eq!(e(CoreError::Format("x".into())), EXIT_FAILURE);
        let wrapped = anyhow::Error::from(CoreError::Numeric("nan".into())).context("training");
        assert_eq!(exit_code(&wrapped), EXIT_NUMERIC);
    }

    #[test]
    fn cli_parses_global_flags_after_subcommand() {
        let c = Cli::try_parse_from(["ductms", "train", "--variant", "blind", "--seed", "3", "--out", "o"]).unwrap();
        assert_eq!(c.seed, Some(3));
        assert!(matches!(c.command, Command::Train { .. }));
    }
}
