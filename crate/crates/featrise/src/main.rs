//! Command-line surface: train, upsample, evaluate, visualize, export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use featrise::encoder::{EncoderConfig, ToyEncoder};
use featrise::error::Error;
use featrise::eval::{
    evaluate_depth, evaluate_segmentation, fit_depth_probe, fit_segmentation_probe, make_depth_set,
    make_segmentation_set, pca_rgb, DepthMode, ProbeHyperparams,
};
use featrise::feature_io::{
    load_image, read_feature_map, resize_bilinear, resize_nearest, save_image, write_feature_map,
    FeatureMap, GuidanceImage,
};
use featrise::synthetic::generate_images;
use featrise::train::{load_checkpoint, train_on_images, ResumeState, TrainConfig};
use featrise::upsampler::Upsampler;

#[derive(Parser)]
#[command(
    name = "featrise",
    version,
    about = "Guided feature-map upsampling that accepts any channel count at any resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an upsampler on a directory of PNGs or on generated images.
    Train(TrainArgs),
    /// Upsample an ANYT feature map to the resolution of a guidance PNG.
    Upsample(UpsampleArgs),
    /// Fit linear probes on synthetic data and score an upsampling method.
    Eval(EvalArgs),
    /// Render the top three principal components of a feature map as a PNG.
    Pca(PcaArgs),
    /// Run the built-in patch encoder on an image and export ANYT features.
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory: final checkpoint, periodic checkpoints, CSV log.
    #[arg(long)]
    out: PathBuf,
    /// Directory of training PNGs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate this many seeded synthetic images instead of reading --data.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Flat JSON config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crops_per_image: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    w_main: Option<f64>,
    #[arg(long)]
    w_input: Option<f64>,
    #[arg(long)]
    w_self: Option<f64>,
    #[arg(long)]
    window_radius: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Sample a fresh crop size per image each step (true by default).
    #[arg(long)]
    vary_crop_sizes: Option<bool>,
}

/// Flat JSON mirror of the train flags. Unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct TrainFileConfig {
    steps: Option<usize>,
    seed: Option<u64>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    crops_per_image: Option<usize>,
    image_size: Option<usize>,
    crop_size: Option<usize>,
    checkpoint_interval: Option<usize>,
    w_main: Option<f64>,
    w_input: Option<f64>,
    w_self: Option<f64>,
    window_radius: Option<usize>,
    patch_size: Option<usize>,
    feature_dim: Option<usize>,
    vary_crop_sizes: Option<bool>,
}

#[derive(Args)]
struct UpsampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input ANYT feature map.
    #[arg(long)]
    features: PathBuf,
    /// Guidance PNG; the output matches its resolution.
    #[arg(long)]
    image: PathBuf,
    /// Output ANYT path.
    #[arg(long)]
    out: PathBuf,
    /// Override the checkpoint's window radius.
    #[arg(long)]
    window_radius: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    /// Probe trained on the upsampled features themselves.
    Upsampled,
    /// Probe trained on raw low-res features, applied to upsampled output.
    Preserve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalTask {
    Segmentation,
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    /// The trained upsampler from --checkpoint.
    Model,
    Bilinear,
    Nearest,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory; required for --method model and used for the
    /// encoder configuration in all cases.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Protocol::Upsampled)]
    protocol: Protocol,
    #[arg(long, value_enum, default_value_t = EvalTask::Segmentation)]
    task: EvalTask,
    #[arg(long, value_enum, default_value_t = Method::Model)]
    method: Method,
    /// Number of synthetic evaluation images.
    #[arg(long, default_value_t = 8)]
    synthetic: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
    /// Report output path (flat key=value text).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PcaArgs {
    /// Input ANYT feature map.
    #[arg(long)]
    features: PathBuf,
    /// Optional ANYT map whose principal components define the projection.
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Input PNG.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Output feature channels.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dense window stride; defaults to the patch size.
    #[arg(long)]
    stride: Option<usize>,
    /// Output ANYT path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<Error>() {
                Some(Error::Numeric(_)) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Upsample(args) => cmd_upsample(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Pca(args) => cmd_pca(args),
        Command::ExportFeatures(args) => cmd_export(args),
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let file_cfg: TrainFileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("config: {e}")))?
        }
        None => TrainFileConfig::default(),
    };

    let mut config = TrainConfig::default();
    let pick_usize = |flag: Option<usize>, file: Option<usize>, dflt: usize| {
        flag.or(file).unwrap_or(dflt)
    };
    config.total_steps = pick_usize(args.steps, file_cfg.steps, config.total_steps);
    config.seed = args.seed.or(file_cfg.seed).unwrap_or(config.seed);
    config.learning_rate = args
        .learning_rate
        .or(file_cfg.learning_rate)
        .unwrap_or(config.learning_rate);
    config.batch_size = pick_usize(args.batch_size, file_cfg.batch_size, config.batch_size);
    config.crops_per_image = pick_usize(
        args.crops_per_image,
        file_cfg.crops_per_image,
        config.crops_per_image,
    );
    config.image_size = pick_usize(args.image_size, file_cfg.image_size, config.image_size);
    config.crop_size = pick_usize(args.crop_size, file_cfg.crop_size, config.crop_size);
    config.checkpoint_interval = pick_usize(
        args.checkpoint_interval,
        file_cfg.checkpoint_interval,
        config.checkpoint_interval,
    );
    config.loss_weights.main = args.w_main.or(file_cfg.w_main).unwrap_or(config.loss_weights.main);
    config.loss_weights.input = args
        .w_input
        .or(file_cfg.w_input)
        .unwrap_or(config.loss_weights.input);
    config.loss_weights.self_consistency = args
        .w_self
        .or(file_cfg.w_self)
        .unwrap_or(config.loss_weights.self_consistency);
    config.upsampler.window_radius = args
        .window_radius
        .or(file_cfg.window_radius)
        .unwrap_or(config.upsampler.window_radius);
    config.encoder.patch_size = args
        .patch_size
        .or(file_cfg.patch_size)
        .unwrap_or(config.encoder.patch_size);
    config.encoder.feature_dim = args
        .feature_dim
        .or(file_cfg.feature_dim)
        .unwrap_or(config.encoder.feature_dim);
    config.vary_crop_sizes = args
        .vary_crop_sizes
        .or(file_cfg.vary_crop_sizes)
        .unwrap_or(config.vary_crop_sizes);
    config.validate()?;

    let images = match (&args.data, args.synthetic) {
        (Some(_), Some(_)) => bail!(Error::Invalid(
            "--data and --synthetic are mutually exclusive".into()
        )),
        (Some(dir), None) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!(Error::Invalid(format!("no PNGs in {}", dir.display())));
            }
            featrise::train::load_dataset(&config, &paths)?
        }
        (None, Some(n)) => {
            if n == 0 {
                bail!(Error::Invalid("--synthetic needs at least 1 image".into()));
            }
            let images = generate_images(n, config.image_size, config.seed);
            let data_dir = args.out.join("data");
            std::fs::create_dir_all(&data_dir)?;
            for (i, img) in images.iter().enumerate() {
                save_image(img, data_dir.join(format!("synthetic_{i:03}.png")))?;
            }
            images
        }
        (None, None) => bail!(Error::Invalid(
            "one of --data or --synthetic is required".into()
        )),
    };

    let resume = match &args.resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            Some(ResumeState {
                upsampler: ckpt.upsampler,
                optimizer: ckpt.optimizer,
                step: ckpt.step,
            })
        }
        None => None,
    };

    let (_, log) = train_on_images(&config, &images, Some(&args.out), resume)?;
    if let Some(last) = log.last() {
        println!(
            "trained {} steps, final loss {:.6} (main {:.6})",
            log.len(),
            last.loss_total,
            last.loss_main
        );
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn load_model(checkpoint: &Path, window_radius: Option<usize>) -> anyhow::Result<Upsampler> {
    let ckpt = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut upsampler = ckpt.upsampler;
    if let Some(r) = window_radius {
        upsampler.config.window_radius = r;
    }
    Ok(upsampler)
}

fn cmd_upsample(args: UpsampleArgs) -> anyhow::Result<()> {
    let upsampler = load_model(&args.checkpoint, args.window_radius)?;
    let features = read_feature_map(&args.features)
        .with_context(|| format!("reading {}", args.features.display()))?;
    let image = load_image(&args.image)?;
    let out = upsampler.upsample(&image, &features)?;
    write_feature_map(&out, &args.out)?;
    println!(
        "upsampled {}x{}x{} -> {}x{}x{}",
        features.height(),
        features.width(),
        features.channels(),
        out.height(),
        out.width(),
        out.channels()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let encoder = ToyEncoder::new(ckpt.train_config.encoder)?;
    let image_size = ckpt.train_config.image_size;
    let images = generate_images(args.synthetic, image_size, args.seed);
    let upsampler = ckpt.upsampler;

    let forward = |f: &FeatureMap, img: &GuidanceImage| -> featrise::Result<FeatureMap> {
        match args.method {
            Method::Model => upsampler.upsample(img, f),
            Method::Bilinear => resize_bilinear(f, img.height(), img.width()),
            Method::Nearest => resize_nearest(f, img.height(), img.width()),
        }
    };
    let hp = ProbeHyperparams {
        seed: args.seed,
        ..ProbeHyperparams::default()
    };

    let report = match args.task {
        EvalTask::Segmentation => {
            let set = make_segmentation_set(&encoder, &images, args.num_classes, args.seed)?;
            let probe = match args.protocol {
                Protocol::Preserve => {
                    let feats: Vec<FeatureMap> =
                        set.samples.iter().map(|s| s.features.clone()).collect();
                    let labels: Vec<_> = set.samples.iter().map(|s| s.grid_labels.clone()).collect();
                    fit_segmentation_probe(&feats, &labels, args.num_classes, hp)?
                }
                Protocol::Upsampled => {
                    let feats: featrise::Result<Vec<FeatureMap>> = set
                        .samples
                        .iter()
                        .map(|s| forward(&s.features, &s.image))
                        .collect();
                    let feats = feats?;
                    let labels: Vec<_> = set
                        .samples
                        .iter()
                        .zip(&feats)
                        .map(|(s, f)| s.pixel_labels.resize_nearest(f.height(), f.width()))
                        .collect();
                    fit_segmentation_probe(&feats, &labels, args.num_classes, hp)?
                }
            };
            evaluate_segmentation(forward, &probe, &set.samples, args.num_classes)?
        }
        EvalTask::Depth => {
            let samples = make_depth_set(&encoder, &images, args.seed)?;
            let probe = match args.protocol {
                Protocol::Preserve => {
                    let feats: Vec<FeatureMap> = samples.iter().map(|s| s.features.clone()).collect();
                    let labels: Vec<_> = samples.iter().map(|s| s.grid_depth.clone()).collect();
                    fit_depth_probe(&feats, &labels, hp)?
                }
                Protocol::Upsampled => {
                    let feats: featrise::Result<Vec<FeatureMap>> = samples
                        .iter()
                        .map(|s| forward(&s.features, &s.image))
                        .collect();
                    let feats = feats?;
                    let labels: Vec<_> = samples
                        .iter()
                        .zip(&feats)
                        .map(|(s, f)| s.pixel_depth.resize_nearest(f.height(), f.width()))
                        .collect();
                    fit_depth_probe(&feats, &labels, hp)?
                }
            };
            evaluate_depth(forward, &probe, &samples, DepthMode::Relative)?
        }
    };

    report.write(&args.out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_pca(args: PcaArgs) -> anyhow::Result<()> {
    let features = read_feature_map(&args.features)?;
    let basis = match &args.basis {
        Some(path) => Some(read_feature_map(path)?),
        None => None,
    };
    let image = pca_rgb(&features, basis.as_ref())?;
    save_image(&image, &args.out)?;
    println!(
        "wrote {}x{} PCA visualization to {}",
        image.height(),
        image.width(),
        args.out.display()
    );
    Ok(())
}

fn cmd_export(args: ExportArgs) -> anyhow::Result<()> {
    let image = load_image(&args.image)?;
    let encoder = ToyEncoder::new(EncoderConfig {
        patch_size: args.patch,
        feature_dim: args.dim,
        hidden_dim: args.hidden,
        seed: args.seed,
    })?;
    let features = match args.stride {
        Some(stride) => encoder.encode_dense(&image, stride)?,
        None => encoder.encode(&image)?,
    };
    write_feature_map(&features, &args.out)?;
    println!(
        "exported {}x{}x{} features to {}",
        features.height(),
        features.width(),
        features.channels(),
        args.out.display()
    );
    Ok(())
}
