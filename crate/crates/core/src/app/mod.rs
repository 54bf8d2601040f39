//! Command-line entry points and the HTTP service.

pub mod pipeline;
pub mod server;

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::attributes::{attribute_vector, levels};
use crate::autodiff::gradcheck::{op_suite, CheckResult};
use crate::curves::unique_color_count;
use crate::error::{Error, Result};
use crate::image::{encode_gray8_png, load_image, save_image, Image};
use crate::metrics::evaluate;
use crate::model::{ModelConfig, RetouchModel};
use crate::style::atp::{plus_one_rule, random_levels, Levels};
use crate::style::{AtpModel, AtpTrainConfig};
use crate::synth::{build_dataset, SynthConfig, SynthDataset};
use crate::training::{pools_from_dataset, train, TrainConfig, TrainOutputs};
use pipeline::{parse_delta, predict_style, quantize_weights, retouch, Mode};
use server::{AppState, Limits, DEFAULT_PORT, PORT_ENV};

#[derive(Debug, Parser)]
#[command(name = "caatp", version, about = "Tone-curve photo retouching driven by attribute sentences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-expert dataset.
    GenData(GenDataArgs),
    /// Print the attribute vector of an image.
    Attrs(ImageArg),
    /// Predict the preferred attribute levels and the matching sentence.
    PredictStyle(PredictStyleArgs),
    /// Train the attribute target predictor.
    TrainAtp(TrainAtpArgs),
    /// Train the retouching model.
    Train(TrainArgs),
    /// Retouch one image.
    Retouch(RetouchArgs),
    /// Evaluate a model on a dataset split.
    Eval(EvalArgs),
    /// Count the distinct 8-bit colors of an image.
    ColorCount(ImageArg),
    /// Finite-difference check of every layer and the full model.
    GradCheck(GradCheckArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of base images; the split is 75/12.5/12.5 percent.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct ImageArg {
    /// 8-bit PNG.
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictStyleArgs {
    /// Attribute predictor checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainAtpArgs {
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Learn one expert of a generated dataset instead of the synthetic
    /// one-level-up rule.
    #[arg(long, requires = "expert")]
    pub data: Option<PathBuf>,
    /// Expert name, used with --data.
    #[arg(long)]
    pub expert: Option<String>,
    /// Number of random level vectors for the synthetic rule.
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write (best validation PSNR).
    #[arg(long)]
    pub out: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One JSON object per epoch.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of curve sets.
    #[arg(long)]
    pub n: Option<usize>,
    /// Use uniform weights instead of the weight network.
    #[arg(long)]
    pub no_weight_net: bool,
    /// Write the freshly initialized (identity) model without training.
    #[arg(long)]
    pub init_only: bool,
}

#[derive(Debug, Args)]
pub struct RetouchArgs {
    /// Retouching model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Six comma-separated level shifts, in attribute order.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "auto")]
    pub delta: Option<String>,
    /// Predict the shifts with the attribute predictor.
    #[arg(long)]
    pub auto: bool,
    /// Attribute predictor checkpoint for --auto.
    #[arg(long)]
    pub atp: Option<PathBuf>,
    /// Directory for the weight maps as grayscale PNGs.
    #[arg(long)]
    pub weights_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val, or test.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Attribute predictor checkpoint; enables auto mode.
    #[arg(long)]
    pub atp: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value_t = Limits::default().max_body_bytes)]
    pub max_body_bytes: usize,
    #[arg(long, default_value_t = Limits::default().max_pixels)]
    pub max_pixels: usize,
}

/// Stable error category printed by the CLI.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Image(_) => "image",
        Error::Shape(_) => "shape",
        Error::Text(_) => "text",
        Error::Checkpoint(_) => "checkpoint",
        Error::Optim(_) => "optimizer",
        Error::Config(_) => "config",
        Error::MissingArtifact(_) => "missing_artifact",
        Error::Empty(_) => "empty",
        Error::NanAttribute(_) => "attribute",
        Error::NonFiniteLoss { .. } => "non_finite_loss",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message }).to_string()
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; failures print one JSON line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &e.to_string()));
            1
        }
    }
}

fn load_required<T>(what: &str, path: &Path, load: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("{what} {}", path.display())));
    }
    load(path)
}

fn load_model(path: &Path) -> Result<RetouchModel> {
    load_required("retouching model checkpoint", path, |p| RetouchModel::load(p))
}

fn load_atp(path: &Path) -> Result<AtpModel> {
    load_required("attribute predictor checkpoint", path, |p| AtpModel::load(p))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Attrs(a) => print_json(&attribute_vector(&load_image(&a.image)?).to_json()),
        Command::PredictStyle(a) => {
            let atp = load_atp(&a.model)?;
            print_json(&predict_style(&atp, &load_image(&a.image)?))
        }
        Command::TrainAtp(a) => train_atp(a),
        Command::Train(a) => train_cmd(a),
        Command::Retouch(a) => retouch_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ColorCount(a) => {
            println!("{}", unique_color_count(&load_image(&a.image)?));
            Ok(())
        }
        Command::GradCheck(a) => grad_check(a.seed),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let test = a.count / 8;
    let cfg = SynthConfig {
        count: a.count,
        size: a.size,
        train: a.count - 2 * test,
        val: test,
        test,
        ..Default::default()
    };
    let ds = build_dataset(a.seed, &cfg)?;
    let m = ds.write(&a.out)?;
    print_json(&json!({
        "dir": a.out,
        "images": a.count,
        "experts": ds.expert_names(),
        "split": m.split,
        "content_hash": m.content_hash,
    }))
}

fn train_atp(a: TrainAtpArgs) -> Result<()> {
    let mut cfg = AtpTrainConfig {
        seed: a.seed,
        ..Default::default()
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let (train_pairs, test_pairs): (Vec<(Levels, Levels)>, Vec<(Levels, Levels)>) = match (&a.data, &a.expert) {
        (Some(dir), Some(name)) => {
            let ds = SynthDataset::read(dir)?;
            let e = ds
                .expert_names()
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Config(format!("unknown expert {name:?}")))?;
            let pairs = |idx: &[usize]| -> Vec<(Levels, Levels)> {
                idx.iter().map(|&i| (levels(&ds.inputs[i]), levels(&ds.targets[i][e]))).collect()
            };
            let mut train_idx = ds.split.train.clone();
            train_idx.extend(&ds.split.val);
            (pairs(&train_idx), pairs(&ds.split.test))
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0xda7a);
            let all: Vec<_> = random_levels(&mut rng, a.samples)
                .into_iter()
                .map(|x| (x, plus_one_rule(&x)))
                .collect();
            let cut = a.samples * 4 / 5;
            (all[..cut].to_vec(), all[cut..].to_vec())
        }
    };
    let (model, losses) = AtpModel::train(&train_pairs, &cfg)?;
    model.save(&a.out)?;
    print_json(&json!({
        "out": a.out,
        "final_loss": losses.last(),
        "train_mae": model.mae(&train_pairs),
        "heldout_mae": if test_pairs.is_empty() { None } else { Some(model.mae(&test_pairs)) },
    }))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n {
        cfg.model.n = n;
    }
    if a.no_weight_net {
        cfg.model.use_weight_net = false;
    }
    cfg.validate()?;
    if a.init_only {
        RetouchModel::new(cfg.model.clone(), cfg.seed)?.save(&a.out)?;
        return print_json(&json!({ "out": a.out, "epochs": 0 }));
    }
    let dir = a
        .data
        .as_ref()
        .ok_or_else(|| Error::MissingArtifact("training data directory (--data)".into()))?;
    let ds = SynthDataset::read(dir)?;
    let tr = pools_from_dataset(&ds, &ds.split.train)?;
    let va = pools_from_dataset(&ds, &ds.split.val)?;
    let outputs = TrainOutputs {
        checkpoint: Some(a.out.clone()),
        log: a.log.clone(),
    };
    let out = train(&tr, &va, &cfg, &outputs)?;
    // The trainer only writes on improvement; make sure the file exists.
    out.model.save(&a.out)?;
    let best = &out.log[out.best_epoch];
    print_json(&json!({
        "out": a.out,
        "epochs": cfg.epochs,
        "best_epoch": out.best_epoch,
        "val_psnr": best.val_psnr,
        "val_ssim": best.val_ssim,
    }))
}

fn retouch_cmd(a: RetouchArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let img = load_image(&a.image)?;
    let (mode, atp) = if a.auto {
        let path = a
            .atp
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact("attribute predictor checkpoint (--atp) for --auto".into()))?;
        (Mode::Auto, Some(load_atp(path)?))
    } else {
        let d = a
            .delta
            .as_deref()
            .ok_or_else(|| Error::Config("give --delta or --auto".into()))?;
        (Mode::Manual(parse_delta(d)?), None)
    };
    let r = retouch(&model, atp.as_ref(), &img, &mode)?;
    save_image(&r.image, &a.out)?;
    if let Some(dir) = &a.weights_dir {
        std::fs::create_dir_all(dir)?;
        for (j, plane) in quantize_weights(&r.weights, r.n).iter().enumerate() {
            std::fs::write(dir.join(format!("weight_{j}.png")), encode_gray8_png(img.height(), img.width(), plane))?;
        }
    }
    println!("{}", r.text);
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let ds = SynthDataset::read(&a.data)?;
    let idx = match a.split.as_str() {
        "train" => &ds.split.train,
        "val" => &ds.split.val,
        "test" => &ds.split.test,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let (report, _) = evaluate(&model, &pools_from_dataset(&ds, idx)?)?;
    print_json(&report)
}

/// Every layer check plus the full model on an 8x8 image.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = op_suite(seed)?;
    let model = RetouchModel::new(ModelConfig::tiny(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::RngExt;
    let img = Image::from_fn(8, 8, |_, _| [rng.random(), rng.random(), rng.random()]);
    let target = Image::from_fn(8, 8, |_, _| [rng.random(), rng.random(), rng.random()]);
    let bands = [1, 2, 3, 4, 5, 3];
    results.extend(model.gradient_check(&img, Some(&bands), &target, 1.0, 0.4, seed)?);
    Ok(results)
}

fn grad_check(seed: u64) -> Result<()> {
    let results = gradient_suite(seed)?;
    let mut failed = Vec::new();
    for r in &results {
        print_json(r)?;
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let atp = a.atp.as_deref().map(load_atp).transpose()?;
    let limits = Limits {
        max_body_bytes: a.max_body_bytes,
        max_pixels: a.max_pixels,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(server::serve(AppState::new(model, atp, limits), SocketAddr::new(a.host, a.port)))?;
    Ok(())
}
