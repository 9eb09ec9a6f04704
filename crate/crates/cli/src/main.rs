mod commands;
mod config;
mod manifest;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands::{invalid, InvalidConfig, Session};
use crate::config::{ExperimentConfig, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "makeup-shield",
    version,
    about = "Protect face images with adversarial makeup"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fine-tune a makeup-removal model on the reference and save its clean version.
    RemoveMakeup(Common),
    /// Fine-tune the protection model and write protected sources.
    Transfer(Common),
    /// Apply saved protection parameters to the source images.
    Protect {
        #[command(flatten)]
        common: Common,
        /// `tuned.json` written by `transfer`.
        #[arg(long)]
        artifacts: PathBuf,
    },
    /// Score a previous run's outputs: ASR, PSNR, SSIM and FID.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Manifest of the run to evaluate.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Compute verification thresholds from impostor pairs.
    CalibrateThreshold(Common),
    /// Send a previous run's outputs to a face-compare service.
    CompareApi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Start an in-process mock scoring with this face embedder instead of
        /// calling the configured endpoint.
        #[arg(long)]
        mock_embedder: Option<String>,
    },
    /// Run the mock face-compare service until interrupted.
    ServeMock {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Always answer with this confidence.
        #[arg(long, conflicts_with = "embedder")]
        fixed: Option<f64>,
        /// Face embedder used for scoring (default: first evaluation embedder).
        #[arg(long)]
        embedder: Option<String>,
    },
    /// Write a synthetic dataset and a matching config.
    GenerateToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn session(c: &Common, needs_masks: bool) -> Result<Session> {
    let cfg = ExperimentConfig::load(&c.config, &c.overrides).map_err(invalid)?;
    Session::open(cfg, needs_masks)
}

fn run(cli: Cli) -> Result<()> {
    let manifest = match cli.command {
        Command::RemoveMakeup(c) => commands::remove_makeup(&session(&c, false)?)?,
        Command::Transfer(c) => commands::transfer(&session(&c, true)?)?,
        Command::Protect { common, artifacts } => {
            commands::protect_sources(&session(&common, false)?, &artifacts)?
        }
        Command::Evaluate { common, manifest } => {
            commands::evaluate(&session(&common, false)?, &manifest)?
        }
        Command::CalibrateThreshold(c) => commands::calibrate(&session(&c, false)?)?,
        Command::CompareApi {
            common,
            manifest,
            mock_embedder,
        } => commands::compare_api(
            &session(&common, false)?,
            &manifest,
            mock_embedder.as_deref(),
        )?,
        Command::ServeMock {
            common,
            addr,
            fixed,
            embedder,
        } => {
            return commands::serve_mock(
                &session(&common, false)?,
                addr,
                fixed,
                embedder.as_deref(),
            )
        }
        Command::GenerateToyData { out, seed } => commands::generate_toy_data(&out, seed)?,
    };
    println!("{}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let is_config = e.chain().any(|c| c.is::<InvalidConfig>());
            let (kind, code) = if is_config {
                ("config", 2)
            } else {
                ("runtime", 1)
            };
            let body = serde_json::json!({
                "error": {
                    "kind": kind,
                    "message": format!("{e:#}"),
                    "exit_code": code,
                }
            });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
