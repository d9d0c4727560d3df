//! Command-line front end: synthetic asset generation, landmark fitting,
//! self-reenactment, relative motion transfer, and image metrics.
//!
//! Every failure prints a stage-tagged diagnostic to stderr and exits
//! nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use safa_motion_kit::assets;
use safa_motion_kit::error::{Error, Result};
use safa_motion_kit::fitting::fit_3dmm;
use safa_motion_kit::pipeline::{
    generate_toy_assets, image_metrics_with_peak, load_landmarks, run_reenact, run_transfer,
    PipelineConfig,
};

#[derive(Parser)]
#[command(
    name = "safa-motion-kit",
    about = "Structure-aware face animation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic model and fixture set plus a ready-to-run config.
    ToyAssets {
        /// Directory the assets are written into.
        #[arg(long)]
        output: PathBuf,
        /// Working resolution (height width).
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        grid: Vec<usize>,
        /// Number of keypoints.
        #[arg(long, default_value_t = 10)]
        keypoints: usize,
    },
    /// Fit model parameters to the source landmarks in the config.
    Fit {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Run the self-reenactment pipeline and write every intermediate.
    Reenact {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Run relative motion transfer over the configured driving sequence.
    Transfer {
        #[command(flatten)]
        common: ConfigArgs,
        /// Maximum number of frames processed in parallel.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compare two images and report L1, PSNR, and SSIM.
    Metrics {
        image_a: PathBuf,
        image_b: PathBuf,
        /// Peak signal value for PSNR.
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
        /// Also write the report as JSON.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(common: &ConfigArgs) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::load(&common.config)?;
    if let Some(output) = &common.output {
        config.output = output.clone();
    }
    Ok(config)
}

#[derive(Serialize)]
struct FitOutput {
    params: safa_motion_kit::ParamSet,
    initial_loss: f64,
    final_loss: f64,
    iterations: usize,
    converged: bool,
    loss_trace: Vec<f64>,
}

fn cmd_fit(common: &ConfigArgs) -> Result<()> {
    let config = load_config(common)?;
    let model = assets::load_model(&config.model)?;
    let landmarks = load_landmarks(&config.source_landmarks)?;
    let report = fit_3dmm(&model, &landmarks, None, &config.fit)?;
    std::fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    let out = FitOutput {
        params: report.params.clone(),
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        iterations: report.iterations,
        converged: report.converged,
        loss_trace: report.loss_trace.clone(),
    };
    assets::save_params(&config.output.join("fitted_params.json"), &report.params)?;
    assets::save_json(&config.output.join("fit_report.json"), &out)?;
    println!(
        "fit: loss {:.6e} -> {:.6e} in {} iterations ({})",
        report.initial_loss,
        report.final_loss,
        report.iterations,
        if report.converged {
            "converged"
        } else {
            "iteration limit"
        }
    );
    Ok(())
}

fn cmd_reenact(common: &ConfigArgs) -> Result<()> {
    let config = load_config(common)?;
    let report = run_reenact(&config)?;
    println!(
        "reenact: wrote {} (l1 {:.6}, psnr {:.2}, ssim {:.4}{})",
        config.output.display(),
        report.warped_vs_source.l1,
        report.warped_vs_source.psnr,
        report.warped_vs_source.ssim,
        if report.attention_fallback {
            ", attention fallback"
        } else {
            ""
        }
    );
    Ok(())
}

fn cmd_transfer(common: &ConfigArgs, jobs: Option<usize>) -> Result<()> {
    let config = load_config(common)?;
    let report = run_transfer(&config, jobs)?;
    println!(
        "transfer: {} frames, reference {} -> {}",
        report.frames.len(),
        report.reference_index,
        config.output.display()
    );
    Ok(())
}

fn cmd_metrics(
    image_a: &PathBuf,
    image_b: &PathBuf,
    peak: f64,
    output: Option<&PathBuf>,
) -> Result<()> {
    let a = assets::load_png(image_a)?;
    let b = assets::load_png(image_b)?;
    let m = image_metrics_with_peak(&a, &b, peak)?;
    println!("l1 {:.8}\npsnr {:.4}\nssim {:.6}", m.l1, m.psnr, m.ssim);
    if let Some(path) = output {
        assets::save_json(path, &m)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::ToyAssets {
            output,
            grid,
            keypoints,
        } => {
            let config = generate_toy_assets(output, [grid[0], grid[1]], *keypoints)?;
            println!("toy assets: wrote {}", config.display());
            Ok(())
        }
        Command::Fit { common } => cmd_fit(common),
        Command::Reenact { common } => cmd_reenact(common),
        Command::Transfer { common, jobs } => cmd_transfer(common, *jobs),
        Command::Metrics {
            image_a,
            image_b,
            peak,
            output,
        } => cmd_metrics(image_a, image_b, *peak, output.as_ref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            match &err {
                Error::Stage { stage, source } => eprintln!("error [{stage}]: {source}"),
                other => eprintln!("error: {other}"),
            }
            ExitCode::FAILURE
        }
    }
}
