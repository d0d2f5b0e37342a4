use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use stec_core::codec::ImageCodec;
use stec_core::container::{self, load_container, save_container};
use stec_core::energy_compaction::{default_alpha, optimal_bit_allocation, BkMethod, EnergyProfile};
use stec_core::media_io::{extract_patches, load_image, load_sequence, store_image, store_sequence};
use stec_core::metrics::{ms_ssim, DistortionKind, RdPoint};
use stec_core::synth::toy_patches;
use stec_core::training::{finetune_lambda, train, write_training_log, LossConfig, TrainSchedule, LAMBDA_LADDER};
use stec_core::transforms::{load_model, save_model, Backend};
use stec_core::video::{plan_sequence, InterpolatorConfig, InterpolatorKind, SchedulerConfig};
use stec_core::{ArchitectureConfig, ImageTensor, Model, ModelParams};

#[derive(Parser)]
#[command(name = "stec", version, about = "Learned image and video codec with energy compaction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch with the two-phase compaction penalty.
    Train(TrainArgs),
    /// Code one picture into a .stec container.
    EncodeImage(EncodeImageArgs),
    /// Reconstruct a picture from a .stec container.
    DecodeImage(DecodeArgs),
    /// Code a Y4M file or PNG frame directory into a .stec container.
    EncodeVideo(EncodeVideoArgs),
    /// Reconstruct a sequence as Y4M (or PNG frames for other paths).
    DecodeVideo(DecodeArgs),
    /// Print per-channel energy fractions, gains and bit allocation as CSV.
    AnalyzeEnergy(AnalyzeArgs),
    /// Print temporal entropy, GOP size and schedule as JSON lines.
    GopPlan(GopPlanArgs),
    /// Measure rate and quality of a model on a set of pictures (CSV).
    Eval(EvalArgs),
    /// Fine-tune a model across the lambda ladder, or evaluate given models, as CSV.
    RdSweep(RdSweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Conv,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum InterpArg {
    Average,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum BkArg {
    Probe,
    Impulse,
}

#[derive(Args)]
struct DataArgs {
    /// Training pictures (PNG/PPM/PGM); patches are cut from each.
    #[arg(long = "image", value_name = "PATH")]
    images: Vec<PathBuf>,
    /// Use this many synthetic toy patches instead of (or besides) pictures.
    #[arg(long, default_value_t = 0)]
    toy: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    /// Channels of the synthetic patches.
    #[arg(long, default_value_t = 1)]
    toy_channels: usize,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 1500)]
    iters: usize,
    /// Cap on phase 1 (entropy penalty) iterations.
    #[arg(long, default_value_t = 750)]
    phase1_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "ms-ssim")]
    distortion: DistortionKind,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value_t = 8.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.001)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = BackendArg::Conv)]
    backend: BackendArg,
    #[arg(long, default_value_t = 2)]
    units: usize,
    #[arg(long, default_value_t = 8)]
    latent: usize,
    #[arg(long, default_value_t = 16)]
    unit_channels: usize,
    /// Write the per-iteration loss log here as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeImageArgs {
    input: PathBuf,
    #[arg(short, long)]
    model: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Store the model inside the container.
    #[arg(long)]
    embed_model: bool,
}

#[derive(Args)]
struct DecodeArgs {
    input: PathBuf,
    /// Model file; optional when the container embeds one.
    #[arg(short, long)]
    model: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    /// Report MS-SSIM of the reconstruction against this source.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct SchedulerArgs {
    #[arg(long, default_value_t = 16)]
    tau: usize,
    #[arg(long, default_value_t = 6.0)]
    lower: f64,
    #[arg(long, default_value_t = 8.0)]
    upper: f64,
}

impl SchedulerArgs {
    fn config(&self) -> SchedulerConfig {
        SchedulerConfig {
            tau: self.tau,
            lower: self.lower,
            upper: self.upper,
            ..SchedulerConfig::default()
        }
    }
}

#[derive(Args)]
struct EncodeVideoArgs {
    input: PathBuf,
    #[arg(short, long)]
    model: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    scheduler: SchedulerArgs,
    #[arg(long, value_enum, default_value_t = InterpArg::Mc)]
    interp: InterpArg,
    #[arg(long, default_value_t = 8)]
    block: usize,
    #[arg(long, default_value_t = 8)]
    search: usize,
    #[arg(long)]
    embed_model: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(short, long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    bk: Option<BkArg>,
    #[arg(long, default_value_t = 8)]
    probe: usize,
    /// Also allocate this many bits per latent sample across channels.
    #[arg(long)]
    rate: Option<f64>,
    /// Quantization noise factor used by the allocation.
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
}

#[derive(Args)]
struct GopPlanArgs {
    input: PathBuf,
    #[command(flatten)]
    scheduler: SchedulerArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(short, long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "eval")]
    label: String,
}

#[derive(Args)]
struct RdSweepArgs {
    /// Fine-tune this model once per lambda.
    #[arg(long, conflicts_with = "models")]
    pretrained: Option<PathBuf>,
    /// Evaluate these models instead, labelled by file stem.
    #[arg(long, num_args = 1..)]
    models: Vec<PathBuf>,
    /// Lambdas to fine-tune for.
    #[arg(long, value_delimiter = ',', default_values_t = LAMBDA_LADDER)]
    lambdas: Vec<f64>,
    /// Where fine-tuned models are written.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Evaluation pictures; defaults to 16 synthetic 64x64 pictures.
    #[arg(long = "eval-image")]
    eval_images: Vec<PathBuf>,
}

fn load_patches(data: &DataArgs, seed: u64) -> Result<Vec<ImageTensor>> {
    let mut patches = Vec::new();
    for (i, path) in data.images.iter().enumerate() {
        let img = load_image(path).with_context(|| format!("loading {}", path.display()))?;
        patches.extend(extract_patches(&img, data.patch, data.patch / 2, seed.wrapping_add(i as u64))?);
    }
    if data.toy > 0 {
        patches.extend(toy_patches(data.toy, data.patch, data.toy_channels, seed.wrapping_add(1))?);
    }
    if patches.is_empty() {
        bail!("no training data: pass --image PATH or --toy N");
    }
    Ok(patches)
}

fn load_pictures(paths: &[PathBuf]) -> Result<Vec<ImageTensor>> {
    paths
        .iter()
        .map(|p| load_image(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn schedule(s: &ScheduleArgs, phase1: usize) -> Result<TrainSchedule> {
    let sched = TrainSchedule {
        phase1_max_iters: phase1,
        total_iters: s.iters,
        learning_rate: s.lr,
        batch_size: s.batch,
        seed: s.seed,
        ..TrainSchedule::default()
    };
    sched.validate()?;
    Ok(sched)
}

fn open_model(path: &Path) -> Result<Model> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let patches = load_patches(&a.data, a.schedule.seed)?;
    let cfg = ArchitectureConfig {
        backend: match a.backend {
            BackendArg::Conv => Backend::Convolutional,
            BackendArg::Linear => Backend::Linear,
        },
        units: a.units,
        latent_channels: a.latent,
        unit_channels: a.unit_channels,
        image_channels: patches[0].channels(),
        ..ArchitectureConfig::default()
    };
    cfg.validate()?;
    let init = ModelParams::init(&cfg, a.schedule.seed)?;
    let loss = LossConfig::new(a.lambda, a.beta, a.schedule.distortion)?;
    info!("training on {} patches of {}x{}", patches.len(), a.data.patch, a.data.patch);
    let outcome = train(&patches, &cfg, &init, &loss, &schedule(&a.schedule, a.schedule.phase1_iters)?)?;
    if let Some(path) = &a.log {
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_training_log(std::io::BufWriter::new(file), &outcome.log)?;
    }
    if let Some(s) = &outcome.switch {
        info!("phase 2 began at iteration {} with dominant channel {}", s.iter, s.dominant);
    }
    let params = outcome.finished()?.params;
    let model = Model::new(cfg, params)?;
    save_model(&a.out, &model)?;
    println!("model {} hash {:016x}", a.out.display(), model.hash());
    Ok(())
}

fn cmd_encode_image(a: &EncodeImageArgs) -> Result<()> {
    let img = load_image(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let codec = ImageCodec::new(open_model(&a.model)?);
    let (c, recon) = container::encode_image(&img, &codec, a.embed_model)?;
    save_container(&a.out, &c)?;
    let bytes = std::fs::metadata(&a.out)?.len();
    let bpp = (bytes * 8) as f64 / (img.width() * img.height()) as f64;
    println!("bytes={bytes} bpp={bpp:.6} ms_ssim={:.9}", ms_ssim(&img, &recon)?);
    Ok(())
}

fn cmd_decode_image(a: &DecodeArgs) -> Result<()> {
    let c = load_container(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let model = a.model.as_deref().map(open_model).transpose()?;
    let img = container::decode_image(&c, model.as_ref())?;
    store_image(&a.out, &img)?;
    if let Some(r) = &a.reference {
        println!("ms_ssim={:.9}", ms_ssim(&load_image(r)?, &img)?);
    }
    Ok(())
}

fn cmd_encode_video(a: &EncodeVideoArgs) -> Result<()> {
    let seq = load_sequence(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let codec = ImageCodec::new(open_model(&a.model)?);
    let interp = InterpolatorConfig {
        kind: match a.interp {
            InterpArg::Average => InterpolatorKind::Average,
            InterpArg::Mc => InterpolatorKind::MotionCompensated,
        },
        block_size: a.block,
        search_range: a.search,
    };
    let (c, enc) = container::encode_video(&seq, &codec, &a.scheduler.config(), &interp, a.embed_model)?;
    save_container(&a.out, &c)?;
    let bytes = std::fs::metadata(&a.out)?.len();
    let rd = stec_core::video::sequence_rd("video", seq.frames(), &enc.recon, (bytes * 8) as f64)?;
    println!(
        "frames={} gops={} bytes={bytes} bpp={:.6} ms_ssim={:.9}",
        seq.len(),
        enc.gops.len(),
        rd.bpp,
        rd.ms_ssim
    );
    Ok(())
}

fn cmd_decode_video(a: &DecodeArgs) -> Result<()> {
    let c = load_container(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let model = a.model.as_deref().map(open_model).transpose()?;
    let seq = container::decode_video(&c, model.as_ref())?;
    store_sequence(&a.out, &seq)?;
    if let Some(r) = &a.reference {
        let src = load_sequence(r)?;
        let rd = stec_core::video::sequence_rd("video", src.frames(), seq.frames(), 0.0)?;
        println!("ms_ssim={:.9}", rd.ms_ssim);
    }
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let model = open_model(&a.model)?;
    let data = load_patches(&a.data, 0)?;
    let method = match a.bk {
        Some(BkArg::Probe) => BkMethod::ConstantProbe,
        Some(BkArg::Impulse) => BkMethod::ImpulseEnergy,
        None => BkMethod::default_for(model.config.backend),
    };
    let profile = EnergyProfile::measure(&data, &model.params, &model.config, method, a.probe)?;
    let alloc = a
        .rate
        .map(|r| optimal_bit_allocation(&profile, &default_alpha(&model.config), r, a.epsilon))
        .transpose()?;
    let mut out = std::io::stdout().lock();
    write!(out, "channel,variance,a,b")?;
    if alloc.is_some() {
        write!(out, ",alpha,rate")?;
    }
    writeln!(out)?;
    for k in 0..profile.a.len() {
        write!(out, "{k},{},{},{}", profile.channel_variances[k], profile.a[k], profile.b[k])?;
        if let Some(al) = &alloc {
            write!(out, ",{},{}", al.alpha[k], al.rates[k])?;
        }
        writeln!(out)?;
    }
    eprintln!(
        "dominant={} max_a={:.6} score={:.6}",
        profile.dominant,
        profile.a[profile.dominant],
        profile.compaction_score()
    );
    Ok(())
}

fn cmd_gop_plan(a: &GopPlanArgs) -> Result<()> {
    let seq = load_sequence(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let mut out = std::io::stdout().lock();
    for (start, plan) in plan_sequence(&seq, &a.scheduler.config())? {
        let steps: Vec<[usize; 3]> = plan
            .steps
            .iter()
            .map(|s| [start + s.target, start + s.left, start + s.right])
            .collect();
        writeln!(out, "{}", json!({"start": start, "H_T": plan.h_t, "T": plan.size, "steps": steps}))?;
    }
    Ok(())
}

fn eval_set(paths: &[PathBuf]) -> Result<Vec<ImageTensor>> {
    if paths.is_empty() {
        Ok(toy_patches(16, 64, 1, 99)?)
    } else {
        load_pictures(paths)
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let codec = ImageCodec::new(open_model(&a.model)?);
    let images = if a.data.images.is_empty() && a.data.toy == 0 {
        eval_set(&[])?
    } else {
        let mut v = load_pictures(&a.data.images)?;
        if a.data.toy > 0 {
            v.extend(toy_patches(a.data.toy, a.data.patch, a.data.toy_channels, 99)?);
        }
        v
    };
    println!("{}", RdPoint::CSV_HEADER);
    println!("{}", codec.evaluate(&images, &a.label)?.csv_row());
    Ok(())
}

fn cmd_rd_sweep(a: &RdSweepArgs) -> Result<()> {
    let eval = eval_set(&a.eval_images)?;
    let mut rows = Vec::new();
    if let Some(pre) = &a.pretrained {
        let base = open_model(pre)?;
        let patches = load_patches(&a.data, a.schedule.seed)?;
        let sched = schedule(&a.schedule, a.schedule.iters)?;
        for &lambda in &a.lambdas {
            info!("fine-tuning at lambda {lambda}");
            let out = finetune_lambda(&patches, &base.config, &base.params, lambda, a.schedule.distortion, &sched)?;
            let model = Model::new(base.config.clone(), out.finished()?.params)?;
            if let Some(dir) = &a.out_dir {
                std::fs::create_dir_all(dir)?;
                save_model(dir.join(format!("lambda_{lambda}.stem")), &model)?;
            }
            rows.push(ImageCodec::new(model).evaluate(&eval, &lambda.to_string())?);
        }
    } else if !a.models.is_empty() {
        for path in &a.models {
            let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            rows.push(ImageCodec::new(open_model(path)?).evaluate(&eval, &label)?);
        }
    } else {
        bail!("pass --pretrained MODEL or --models MODEL...");
    }
    println!("{}", RdPoint::CSV_HEADER);
    for r in rows {
        println!("{}", r.csv_row());
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::EncodeImage(a) => cmd_encode_image(a),
        Command::DecodeImage(a) => cmd_decode_image(a),
        Command::EncodeVideo(a) => cmd_encode_video(a),
        Command::DecodeVideo(a) => cmd_decode_video(a),
        Command::AnalyzeEnergy(a) => cmd_analyze(a),
        Command::GopPlan(a) => cmd_gop_plan(a),
        Command::Eval(a) => cmd_eval(a),
        Command::RdSweep(a) => cmd_rd_sweep(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
