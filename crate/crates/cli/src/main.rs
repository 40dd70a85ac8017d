use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use intersliceboost::pipeline::{run_pipeline, ExperimentConfig, RunManifest, RunOptions, StageKind, StageStatus};
use intersliceboost::Error;

const DEVICE_VAR: &str = "ISB_DEVICE";

#[derive(Parser)]
#[command(
    name = "intersliceboost",
    version,
    about = "Inter-slice image-mask augmentation experiments on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom volumes.
    Phantom(Common),
    /// Assign patients to train, validation, test and subset B.
    Split(Common),
    /// Drop annotations according to each setting.
    Sparsify(Common),
    /// Train the inter-slice generator.
    TrainGen(Common),
    /// Fill the gaps with generated image-mask pairs.
    Fill(Common),
    /// Train the deblurring model and apply it.
    TrainDeblur(Common),
    /// Train the segmenters on every dataset variant.
    TrainSeg(Common),
    /// Score segmenters and generators on held-out data.
    Eval(Common),
    /// Write the report files.
    Report(Common),
    /// Run the whole pipeline, or stop after `--stage`.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "NAME")]
        stage: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Restrict the run to a single annotation setting.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u8).range(1..=4))]
    setting: Option<u8>,
    /// Continue after a previously failed run.
    #[arg(long)]
    resume: bool,
}

impl Command {
    fn split(self) -> anyhow::Result<(Common, Option<StageKind>)> {
        let fixed = |c, k| Ok((c, Some(k)));
        match self {
            Command::Phantom(c) => fixed(c, StageKind::Phantom),
            Command::Split(c) => fixed(c, StageKind::Split),
            Command::Sparsify(c) => fixed(c, StageKind::Sparsify),
            Command::TrainGen(c) => fixed(c, StageKind::TrainGen),
            Command::Fill(c) => fixed(c, StageKind::Fill),
            Command::TrainDeblur(c) => fixed(c, StageKind::TrainDeblur),
            Command::TrainSeg(c) => fixed(c, StageKind::TrainSeg),
            Command::Eval(c) => fixed(c, StageKind::Eval),
            Command::Report(c) => fixed(c, StageKind::Report),
            Command::Run { common, stage } => {
                let until = stage.as_deref().map(StageKind::parse).transpose()?;
                Ok((common, until))
            }
        }
    }
}

fn check_device() -> anyhow::Result<()> {
    match std::env::var(DEVICE_VAR) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => {
            bail!("{DEVICE_VAR}={d}: only `cpu` is supported")
        }
        _ => Ok(()),
    }
}

fn build_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &common.output {
        config.output_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(s) = common.setting {
        config.settings = vec![s as usize];
    }
    Ok(config)
}

fn print_manifest(manifest: &RunManifest) {
    for s in &manifest.stages {
        let status = match s.status {
            StageStatus::Completed => "completed",
            StageStatus::Cached => "cached",
            StageStatus::Failed => "FAILED",
        };
        println!("{:<28} {:<10} {:>8.1}s", s.name, status, s.seconds);
    }
}

fn failed_stage(e: &Error) -> Option<(&str, &Error)> {
    match e {
        Error::Stage { stage, source } => Some((stage, source)),
        _ => None,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let prepared = check_device().and_then(|_| {
        let (common, until) = cli.command.split()?;
        let config = build_config(&common)?;
        Ok((
            config,
            RunOptions {
                resume: common.resume,
                until,
            },
        ))
    });
    let (config, options) = match prepared {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run_pipeline(&config, &options) {
        Ok(manifest) => {
            print_manifest(&manifest);
            println!("output: {}", config.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            match failed_stage(&e) {
                Some((stage, source)) => eprintln!("stage {stage} failed: {source}"),
                None => eprintln!("error: {e}"),
            }
            ExitCode::FAILURE
        }
    }
}
