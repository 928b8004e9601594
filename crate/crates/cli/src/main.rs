use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lapstyle::base_net::BaseNet;
use lapstyle::detail_net::{full_stylize, StylizeOptions};
use lapstyle::evaluation::{evaluate_batch, PerceptualWeights};
use lapstyle::features::Encoder;
use lapstyle::training::{self, resolve_encoder, Checkpoint, Stage, TrainConfig};
use lapstyle::{pyramid, Error, Image};

/// Environment variable naming the encoder weight archive.
const WEIGHTS_ENV: &str = "LAPSTYLE_WEIGHTS";
/// Smallest side of the low-frequency image written by `decompose`.
const MIN_LOW_SIDE: usize = 4;

#[derive(Parser)]
#[command(name = "lapstyle", version, about = "Two-stage Laplacian-pyramid style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split an image into its low-frequency base and residuals.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long = "out-dir", alias = "out")]
        out_dir: PathBuf,
    },
    /// Train one stage from a TOML configuration.
    Train(TrainArgs),
    /// Stylize a content image with trained checkpoints.
    Stylize(StylizeArgs),
    /// Compute PSNR / SSIM / perceptual distance over a pair manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vgg_weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        vgg_seed: u64,
        /// Per-channel weights for the perceptual distance.
        #[arg(long)]
        perceptual_weights: Option<PathBuf>,
        #[arg(long)]
        no_perceptual: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    stage: Option<Stage>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    stage1_checkpoint: Option<PathBuf>,
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
    /// Continue from a checkpoint of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, alias = "no_lp")]
    no_lp: bool,
    #[arg(long, alias = "no_lss")]
    no_lss: bool,
    #[arg(long, alias = "no_lmv")]
    no_lmv: bool,
    #[arg(long, alias = "no_lr")]
    no_lr: bool,
    #[arg(long, alias = "no_eis")]
    no_eis: bool,
    #[arg(long, alias = "no_base_net")]
    no_base_net: bool,
}

#[derive(Args)]
struct StylizeArgs {
    #[arg(long)]
    content: PathBuf,
    /// Style image; resized and cropped to the content's size.
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    detail_checkpoint: PathBuf,
    /// Defaults to the base checkpoint recorded in the detail checkpoint.
    #[arg(long)]
    base_checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write every intermediate resolution as `<stem>_<w>x<h>.png`.
    #[arg(long)]
    dump_intermediates: bool,
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
    #[arg(long, alias = "no_base_net")]
    no_base_net: bool,
    #[arg(long, alias = "no_eis")]
    no_eis: bool,
}

fn env_weights() -> Option<PathBuf> {
    std::env::var_os(WEIGHTS_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn decompose(input: &Path, levels: usize, out_dir: &Path) -> anyhow::Result<()> {
    let img = Image::load(input)?;
    let (h, w) = img.dims();
    if levels > 0 && (h >> levels < MIN_LOW_SIDE || w >> levels < MIN_LOW_SIDE) {
        return Err(Error::Dimension(format!(
            "{h}x{w} image is too small for {levels} levels: the low-frequency image would be below {MIN_LOW_SIDE}x{MIN_LOW_SIDE}"
        ))
        .into());
    }
    let pyr = pyramid::decompose(&img, levels)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    pyr.low.save(out_dir.join("low.png"))?;
    for (k, r) in pyr.residuals.iter().enumerate() {
        r.save_residual(out_dir.join(format!("h{k}.png")))?;
    }
    let recon = pyr.reconstruct()?;
    recon.save(out_dir.join("recon.png"))?;
    println!("levels={levels} low={}x{}", pyr.low.width(), pyr.low.height());
    println!("recon_max_abs_error={:e}", recon.max_abs_diff(&img)?);
    Ok(())
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(v) = args.stage {
        cfg.stage = v;
    }
    if let Some(v) = args.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.levels {
        cfg.levels = v;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = Some(v);
    }
    if let Some(v) = &args.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &args.stage1_checkpoint {
        cfg.stage1_checkpoint = Some(v.clone());
    }
    if let Some(v) = args.vgg_weights.clone().or_else(|| cfg.vgg_weights.clone()).or_else(env_weights) {
        cfg.vgg_weights = Some(v);
    }
    cfg.no_lp |= args.no_lp;
    cfg.no_lss |= args.no_lss;
    cfg.no_lmv |= args.no_lmv;
    cfg.no_lr |= args.no_lr;
    cfg.no_eis |= args.no_eis;
    cfg.no_base_net |= args.no_base_net;
    let resume = args.resume.as_ref().map(Checkpoint::load).transpose()?;
    let outcome = training::train(&cfg, resume)?;
    if let (Some(first), Some(last)) = (outcome.reports.first(), outcome.reports.last()) {
        println!("initial_total={}", first.total);
        println!("final_total={}", last.total);
    }
    println!("checkpoint={}", outcome.checkpoint_path.display());
    println!("log={}", outcome.log_path.display());
    match &outcome.plot_path {
        Some(p) => println!("plot={}", p.display()),
        None => println!("plot=skipped"),
    }
    if let Some(check) = outcome.low_source {
        println!("low_frequency_max_diff_from_content={:e}", check.max_abs_diff_from_content_low);
    }
    Ok(())
}

fn stylize(args: &StylizeArgs) -> anyhow::Result<()> {
    let detail_ck = Checkpoint::load(&args.detail_checkpoint)?;
    let detail = detail_ck.detail_net()?;
    let cfg = &detail_ck.config;
    let opts = StylizeOptions { no_base_net: args.no_base_net || cfg.no_base_net, no_eis: args.no_eis || cfg.no_eis };
    let base = if opts.no_base_net {
        BaseNet::init(0)
    } else {
        let path = match (&args.base_checkpoint, &cfg.stage1_checkpoint) {
            (Some(p), _) | (None, Some(p)) => p.clone(),
            (None, None) => bail!(Error::Config {
                key: "base_checkpoint".into(),
                reason: "no base checkpoint given and none recorded in the detail checkpoint".into()
            }),
        };
        Checkpoint::load(&path)?.base_net()?
    };
    let weights = args.vgg_weights.clone().or_else(|| cfg.vgg_weights.clone()).or_else(env_weights);
    let encoder: Encoder = resolve_encoder(weights.as_deref(), cfg.vgg_seed)?;
    let content = Image::load(&args.content)?;
    let (h, w) = content.dims();
    let style = Image::load_fill(&args.style, h, w)?;
    let out = full_stylize(&content, &style, &encoder, &base, &detail, opts)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    out.image.save(&args.out)?;
    println!("output={}", args.out.display());
    if args.dump_intermediates {
        let stem = args.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "stylized".into());
        let dir = args.out.parent().unwrap_or(Path::new(""));
        for stage in &out.stages {
            let path = dir.join(format!("{stem}_{}x{}.png", stage.width(), stage.height()));
            stage.clamp01().save(&path)?;
            println!("intermediate={}", path.display());
        }
    }
    println!("stylize_seconds={:.6}", out.seconds);
    Ok(())
}

fn evaluate(
    manifest: &Path,
    out: &Path,
    vgg_weights: Option<PathBuf>,
    vgg_seed: u64,
    perceptual_weights: Option<&Path>,
    no_perceptual: bool,
) -> anyhow::Result<()> {
    let encoder = if no_perceptual {
        None
    } else {
        Some(resolve_encoder(vgg_weights.or_else(env_weights).as_deref(), vgg_seed)?)
    };
    let weights = perceptual_weights.map(PerceptualWeights::load).transpose()?;
    let report = evaluate_batch(manifest, encoder.as_ref(), weights.as_ref())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
    println!("pairs={} failed={}", report.rows.len(), report.failed);
    println!("mean_psnr_db={} (excluded {} infinite)", fmt(report.mean_psnr), report.infinite_psnr);
    println!("mean_ssim={}", fmt(report.mean_ssim));
    println!("mean_perceptual={}", fmt(report.mean_perceptual));
    println!("report={}", out.display());
    Ok(())
}

/// Input-validation failures exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Dimension(_) | Error::Config { .. } | Error::ShapeMismatch { .. } | Error::MissingLayer(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Decompose { input, levels, out_dir } => decompose(input, *levels, out_dir),
        Command::Train(args) => train(args),
        Command::Stylize(args) => stylize(args),
        Command::Evaluate { manifest, out, vgg_weights, vgg_seed, perceptual_weights, no_perceptual } => {
            evaluate(manifest, out, vgg_weights.clone(), *vgg_seed, perceptual_weights.as_deref(), *no_perceptual)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
