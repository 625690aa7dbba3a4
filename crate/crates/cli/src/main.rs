//! Experiment harness around the deep-decoder library: compression parity
//! against wavelet thresholding, the three inverse problems, the analytical
//! checks, and the fitted-model studies. Every run writes a manifest, a
//! metrics CSV, and its image artifacts into its own output directory.

mod commands;
mod harness;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Adam,
    Gd,
}

/// Flags shared by every fitting command (global so they also apply after
/// nested subcommands like `theory lemma2`).
#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    /// Channels per layer (default depends on the command).
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Network depth.
    #[arg(long, global = true, default_value_t = 6)]
    pub d: usize,
    /// Optimizer iterations.
    #[arg(long, global = true, default_value_t = 5000)]
    pub iters: usize,
    /// Learning rate.
    #[arg(long, global = true, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Stop the optimization early at this iteration.
    #[arg(long, global = true)]
    pub stop_at: Option<usize>,
    /// Trace recording interval.
    #[arg(long, global = true, default_value_t = 50)]
    pub log_every: usize,
    /// Parallel fits across images/trials (never within one fit).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Output root (defaults to $DEEP_DECODER_OUT, then ./runs).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = MethodArg::Adam)]
    pub method: MethodArg,
}

/// A fitted model comes either from an image (fit it now) or from a saved
/// parameter bundle of an earlier run.
#[derive(Args, Debug, Clone)]
pub struct SourceArgs {
    /// Image to fit.
    pub image: Option<PathBuf>,
    /// Parameter bundle (`*_params.json`) from an earlier run.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit images and compare against wavelet thresholding at equal budget.
    Compress {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Add Gaussian noise and restore (default k = 128).
    Denoise {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Noise standard deviation on the [0,1] scale.
        #[arg(long)]
        sigma: Option<f64>,
        /// Choose sigma so the noisy input sits at this PSNR (default 20 dB).
        #[arg(long)]
        input_psnr: Option<f64>,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// 4x downsample, then reconstruct; compared against bicubic.
    Superres {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Reconstruct an image observed through a 0/1 mask (default k = 320).
    Inpaint {
        image: PathBuf,
        /// Mask PNG: pixels < 128 are hidden, >= 128 kept.
        #[arg(long)]
        mask: PathBuf,
        /// Extra observation noise.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Analytical checks: noise-fitting bound, sign patterns, projections,
    /// and the 1-D upsampling experiment.
    Theory {
        #[command(subcommand)]
        cmd: TheoryCmd,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Perturb fitted weights layer by layer and track image PSNR.
    Sensitivity {
        #[command(flatten)]
        source: SourceArgs,
        /// Restrict to one weight layer (0-based; default: all).
        #[arg(long)]
        layer: Option<usize>,
        /// Weight-noise SNR grid in dB.
        #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40")]
        snr_grid: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Quantize fitted weights uniformly per matrix and re-render.
    Quantize {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Per-layer weight histograms with Gaussian moment fits.
    Weighthist {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value_t = 41)]
        bins: usize,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Dump per-layer activation-map grids as PNGs.
    Activations {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Generate a deterministic synthetic test image.
    Synth {
        /// scene | phantom | gradient
        #[arg(long, default_value = "scene")]
        kind: String,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        variant: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum TheoryCmd {
    /// Empirical check of the one-layer noise-fitting lower bound.
    Prop1 {
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 256)]
        n0: usize,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        draws: usize,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        #[arg(long, default_value_t = 300)]
        iterations: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
    },
    /// Sign-pattern counts: exact k=2 sweep plus a Monte-Carlo bound check.
    Lemma1 {
        #[arg(long, default_value_t = 12)]
        n_max: usize,
        #[arg(long, default_value_t = 8)]
        mc_n: usize,
        #[arg(long, default_value_t = 5)]
        mc_k: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Random-subspace projection concentration.
    Lemma2 {
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        l: usize,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Linear versus convex upsampling on a piecewise-smooth 1-D target.
    Upsample1d {
        #[arg(long, default_value_t = 5)]
        d: usize,
        #[arg(long, default_value_t = 16)]
        n0: usize,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
}

#[derive(Parser, Debug)]
#[command(
    name = "deep-decoder",
    version,
    about = "Untrained image prior: compression, denoising, super-resolution, inpainting, and the analytical checks behind it"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Compress { images, fit } => commands::cmd_compress(images, fit),
        Command::Denoise { images, sigma, input_psnr, fit } => {
            commands::cmd_denoise(images, *sigma, *input_psnr, fit)
        }
        Command::Superres { images, fit } => commands::cmd_superres(images, fit),
        Command::Inpaint { image, mask, sigma, fit } => {
            commands::cmd_inpaint(image, mask, *sigma, fit)
        }
        Command::Theory { cmd, fit } => commands::cmd_theory(cmd, fit),
        Command::Sensitivity { source, layer, snr_grid, trials, fit } => {
            commands::cmd_sensitivity(source, *layer, snr_grid, *trials, fit)
        }
        Command::Quantize { source, bits, fit } => commands::cmd_quantize(source, *bits, fit),
        Command::Weighthist { source, bins, fit } => commands::cmd_weighthist(source, *bins, fit),
        Command::Activations { source, fit } => commands::cmd_activations(source, fit),
        Command::Synth { kind, height, width, variant, out } => {
            commands::cmd_synth(kind, *height, *width, *variant, out)
        }
    }
}
