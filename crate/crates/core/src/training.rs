//! Losses, multi-version target sampling, and the optimization loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{levels, NUM_ATTRIBUTES};
use crate::autodiff::{cosine_factor, Adam, Tape, Tensor};
use crate::error::{Error, Result, ShapeError};
use crate::image::Image;
use crate::metrics::{psnr, ssim};
use crate::model::{ModelConfig, RetouchModel, GROUP_ENCODER, GROUP_HEAD};
use crate::style::{parse_text, render_text};
use crate::synth::SynthDataset;

/// Hyperparameters of a training run, including the model shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub head_lr: f64,
    pub encoder_lr: f64,
    pub seed: u64,
    /// Curve-set counts swept by ablation runs.
    pub n_sweep: Vec<usize>,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.4,
            epochs: 60,
            batch_size: 4,
            head_lr: 1e-3,
            encoder_lr: 1e-4,
            seed: 0,
            n_sweep: vec![1, 3, 5],
            flip_horizontal: false,
            flip_vertical: false,
            model: ModelConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<const K: usize>(key: &str, value: &str) -> Result<[usize; K]> {
    let items = value
        .split(',')
        .map(|v| parse_value::<usize>(key, v.trim()))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {K} comma-separated values")))
}

impl TrainConfig {
    /// Parses flat `key = value` lines; `#` starts a comment and unknown
    /// keys are rejected. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "alpha" => c.alpha = parse_value(key, value)?,
                "beta" => c.beta = parse_value(key, value)?,
                "epochs" => c.epochs = parse_value(key, value)?,
                "batch_size" => c.batch_size = parse_value(key, value)?,
                "head_lr" => c.head_lr = parse_value(key, value)?,
                "encoder_lr" => c.encoder_lr = parse_value(key, value)?,
                "seed" => c.seed = parse_value(key, value)?,
                "n_sweep" => {
                    c.n_sweep = value
                        .split(',')
                        .map(|v| parse_value(key, v.trim()))
                        .collect::<Result<_>>()?
                }
                "flip_horizontal" => c.flip_horizontal = parse_value(key, value)?,
                "flip_vertical" => c.flip_vertical = parse_value(key, value)?,
                "n" => c.model.n = parse_value(key, value)?,
                "p" => c.model.p = parse_value(key, value)?,
                "l" => c.model.l = parse_value(key, value)?,
                "d" => c.model.d = parse_value(key, value)?,
                "encoder_size" => c.model.encoder_size = parse_value(key, value)?,
                "encoder_widths" => c.model.encoder_widths = parse_list(key, value)?,
                "weight_widths" => c.model.weight_widths = parse_list(key, value)?,
                "use_weight_net" => c.model.use_weight_net = parse_value(key, value)?,
                "use_text" => c.model.use_text = parse_value(key, value)?,
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", no + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Renders every key in the format [`TrainConfig::parse`] reads.
    pub fn to_kv(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let m = &self.model;
        let mut s = String::new();
        let pairs = [
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("head_lr", self.head_lr.to_string()),
            ("encoder_lr", self.encoder_lr.to_string()),
            ("seed", self.seed.to_string()),
            ("n_sweep", join(&self.n_sweep)),
            ("flip_horizontal", self.flip_horizontal.to_string()),
            ("flip_vertical", self.flip_vertical.to_string()),
            ("n", m.n.to_string()),
            ("p", m.p.to_string()),
            ("l", m.l.to_string()),
            ("d", m.d.to_string()),
            ("encoder_size", m.encoder_size.to_string()),
            ("encoder_widths", join(&m.encoder_widths)),
            ("weight_widths", join(&m.weight_widths)),
            ("use_weight_net", m.use_weight_net.to_string()),
            ("use_text", m.use_text.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail("alpha and beta must be non-negative");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.head_lr > 0.0 && self.encoder_lr >= 0.0) {
            return fail("learning rates must be positive");
        }
        if self.n_sweep.contains(&0) {
            return fail("n_sweep entries must be at least 1");
        }
        self.model.validate()
    }
}

/// One base image and every retouched version of it.
#[derive(Debug, Clone, PartialEq)]
pub struct StylePool {
    input: Image,
    versions: Vec<Image>,
}

/// A training example drawn from a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Image,
    pub target: Image,
    pub version: usize,
    pub text: String,
    pub bands: [u8; NUM_ATTRIBUTES],
}

/// Attribute sentence describing how `target` differs from `input`.
pub fn target_text(input: &Image, target: &Image) -> String {
    let (sx, sy) = (levels(input), levels(target));
    render_text(&std::array::from_fn(|i| sy[i] - sx[i]))
}

impl StylePool {
    pub fn new(input: Image, versions: Vec<Image>) -> Result<Self> {
        if versions.is_empty() {
            return Err(Error::Empty("style pool"));
        }
        for v in &versions {
            if v.height() != input.height() || v.width() != input.width() {
                return Err(ShapeError::Mismatch(
                    vec![input.height(), input.width()],
                    vec![v.height(), v.width()],
                )
                .into());
            }
        }
        Ok(Self { input, versions })
    }

    pub fn input(&self) -> &Image {
        &self.input
    }

    pub fn versions(&self) -> &[Image] {
        &self.versions
    }

    /// The example pairing the input with version `k`.
    pub fn sample(&self, k: usize) -> Result<Sample> {
        let target = self.versions.get(k).ok_or(Error::Empty("style version"))?.clone();
        let text = target_text(&self.input, &target);
        let bands = parse_text(&text)?;
        Ok(Sample {
            input: self.input.clone(),
            target,
            version: k,
            text,
            bands,
        })
    }

    /// Uniformly random version.
    pub fn sample_pair(&self, rng: &mut impl rand::Rng) -> Result<Sample> {
        self.sample(rng.random_range(0..self.versions.len()))
    }
}

/// Pools for the given image indices of a synthetic dataset.
pub fn pools_from_dataset(ds: &SynthDataset, indices: &[usize]) -> Result<Vec<StylePool>> {
    indices
        .iter()
        .map(|&i| StylePool::new(ds.inputs[i].clone(), ds.targets[i].clone()))
        .collect()
}

fn planar64(img: &Image) -> Tensor<f64> {
    Tensor::new(
        &[3, img.height(), img.width()],
        img.to_planar().iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("image shape")
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(ShapeError::Mismatch(vec![a.height(), a.width()], vec![b.height(), b.width()]).into());
    }
    Ok(())
}

pub fn mse_loss(pred: &Image, target: &Image) -> Result<f64> {
    crate::metrics::mse(pred, target)
}

pub fn ssim_loss(pred: &Image, target: &Image) -> Result<f64> {
    Ok(1.0 - ssim(pred, target)?)
}

/// `alpha * mse + beta * (1 - ssim)`, evaluated on the same graph the
/// trainer differentiates.
pub fn total_loss(pred: &Image, target: &Image, alpha: f64, beta: f64) -> Result<f64> {
    check_shapes(pred, target)?;
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(planar64(pred));
    let t = tape.constant(planar64(target));
    let (total, _, _) = crate::model::total_loss(&mut tape, p, t, alpha, beta)?;
    Ok(tape.value(total).item())
}

/// Per-epoch entry of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    pub ssim_loss: f64,
    pub lr_scale: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log entry serializes")
    }
}

/// Result of [`train`]: the checkpoint with the best validation PSNR (the
/// final one when there is no validation set) and the full log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RetouchModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Mean PSNR and SSIM of `model` over every (input, version) pair.
pub fn validate(model: &RetouchModel, pools: &[StylePool]) -> Result<(f64, f64)> {
    if pools.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let (mut p, mut s, mut n) = (0.0, 0.0, 0.0);
    for pool in pools {
        for k in 0..pool.versions.len() {
            let sample = pool.sample(k)?;
            let out = model.forward_bands(&sample.input, Some(&sample.bands))?.image;
            // A perfect reconstruction would make the mean infinite; cap
            // each pair at 100 dB.
            p += psnr(&out, &sample.target)?.min(100.0);
            s += ssim(&out, &sample.target)?;
            n += 1.0;
        }
    }
    Ok((p / n, s / n))
}

fn augment(sample: &mut Sample, config: &TrainConfig, rng: &mut ChaCha8Rng) {
    if config.flip_horizontal && rng.random_bool(0.5) {
        sample.input = sample.input.flip_horizontal();
        sample.target = sample.target.flip_horizontal();
    }
    if config.flip_vertical && rng.random_bool(0.5) {
        sample.input = sample.input.flip_vertical();
        sample.target = sample.target.flip_vertical();
    }
}

/// Trains a fresh model built from `config.model`.
pub fn train(
    train_pools: &[StylePool],
    val_pools: &[StylePool],
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    let model = RetouchModel::new(config.model.clone(), config.seed)?;
    train_model(model, train_pools, val_pools, config, outputs)
}

/// Adam with per-epoch cosine annealing; one version per image is drawn
/// every epoch and gradients are averaged over each batch.
pub fn train_model(
    mut model: RetouchModel,
    train_pools: &[StylePool],
    val_pools: &[StylePool],
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_pools.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a1);
    let mut lrs = vec![0.0; 2];
    lrs[GROUP_ENCODER] = config.encoder_lr;
    lrs[GROUP_HEAD] = config.head_lr;
    let mut adam = Adam::new(model.params(), lrs);
    let mut log = Vec::with_capacity(config.epochs);
    let mut log_text = String::new();
    let mut best: Option<(f64, usize, RetouchModel)> = None;

    for epoch in 0..config.epochs {
        let lr_scale = cosine_factor(epoch, config.epochs);
        let mut order: Vec<usize> = (0..train_pools.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let (mut loss_sum, mut mse_sum, mut ssim_sum) = (0.0, 0.0, 0.0);
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            for &i in chunk {
                let mut sample = train_pools[i].sample_pair(&mut rng)?;
                augment(&mut sample, config, &mut rng);
                let lg = model.loss_and_grads(&sample.input, Some(&sample.bands), &sample.target, config.alpha, config.beta)?;
                if !lg.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
                loss_sum += lg.loss;
                mse_sum += lg.mse;
                ssim_sum += lg.ssim_loss;
                match acc.as_mut() {
                    None => acc = Some(lg.grads),
                    Some(a) => {
                        for (t, g) in a.iter_mut().zip(&lg.grads) {
                            t.add_assign(g);
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f32;
            let grads: Vec<Tensor<f32>> = acc
                .expect("chunks are non-empty")
                .into_iter()
                .map(|t| t.map(|v| v * inv))
                .collect();
            adam.step(model.params_mut(), &grads, lr_scale)?;
        }
        let n = train_pools.len() as f64;
        let (val_psnr, val_ssim) = if val_pools.is_empty() {
            (None, None)
        } else {
            let (p, s) = validate(&model, val_pools)?;
            (Some(p), Some(s))
        };
        let entry = EpochLog {
            epoch,
            loss: loss_sum / n,
            mse: mse_sum / n,
            ssim_loss: ssim_sum / n,
            lr_scale,
            val_psnr,
            val_ssim,
        };
        log_text.push_str(&entry.to_json_line());
        log_text.push('\n');
        if let Some(path) = &outputs.log {
            std::fs::write(path, &log_text)?;
        }
        let score = val_psnr.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_psnr.is_none() || score > *b,
        };
        if improved {
            if let Some(path) = &outputs.checkpoint {
                model.save(path)?;
            }
            best = Some((score, epoch, model.clone()));
        }
        log.push(entry);
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{apply_expert, default_experts, generate_base};

    fn pool(versions: usize) -> StylePool {
        let x = generate_base(3, 1, 16).unwrap().remove(0);
        let experts = default_experts();
        let ys = (0..versions).map(|k| apply_expert(&x, &experts[k % 3]).quantized()).collect();
        StylePool::new(x, ys).unwrap()
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut c = TrainConfig::default();
        c.epochs = 7;
        c.head_lr = 2.5e-3;
        c.n_sweep = vec![1, 2];
        c.model.use_weight_net = false;
        c.model.encoder_widths = [4, 5, 6, 128];
        assert_eq!(TrainConfig::parse(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn config_parse_errors() {
        assert!(TrainConfig::parse("epochs = 0").is_err());
        assert!(TrainConfig::parse("nonsense = 1").is_err());
        assert!(TrainConfig::parse("epochs 3").is_err());
        assert!(TrainConfig::parse("beta = -1").is_err());
        let c = TrainConfig::parse("# comment\n\nepochs = 3 # trailing\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(!c.flip_horizontal && !c.flip_vertical);
    }

    #[test]
    fn single_version_pool_always_returns_it() {
        let p = pool(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(p.sample_pair(&mut rng).unwrap().target, p.versions()[0]);
        }
    }

    #[test]
    fn sampling_is_uniform() {
        let p = pool(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[p.sample_pair(&mut rng).unwrap().version] += 1;
        }
        for c in counts {
            assert!((c as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.05, "{counts:?}");
        }
    }

    #[test]
    fn unchanged_target_gives_medium_sentence() {
        let x = generate_base(4, 1, 16).unwrap().remove(0);
        let p = StylePool::new(x.clone(), vec![x]).unwrap();
        let s = p.sample(0).unwrap();
        assert_eq!(s.bands, [3; NUM_ATTRIBUTES]);
        assert_eq!(s.text, render_text(&[0.0; NUM_ATTRIBUTES]));
    }

    #[test]
    fn pool_validation() {
        let x = Image::filled(8, 8, [0.5; 3]);
        assert!(matches!(StylePool::new(x.clone(), vec![]), Err(Error::Empty(_))));
        assert!(StylePool::new(x, vec![Image::filled(8, 9, [0.5; 3])]).is_err());
    }

    #[test]
    fn loss_values() {
        let a = generate_base(5, 1, 16).unwrap().remove(0);
        let b = apply_expert(&a, &default_experts()[1]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert!(ssim_loss(&a, &a).unwrap().abs() < 1e-9);
        assert!(total_loss(&a, &a, 1.0, 0.4).unwrap().abs() < 1e-9);
        let black = Image::filled(8, 8, [0.0; 3]);
        let white = Image::filled(8, 8, [1.0; 3]);
        assert_eq!(mse_loss(&black, &white).unwrap(), 1.0);
        let m = mse_loss(&a, &b).unwrap();
        assert!((total_loss(&a, &b, 1.0, 0.0).unwrap() - m).abs() <= 1e-15 * m);
        let combined = m + 0.4 * ssim_loss(&a, &b).unwrap();
        assert!((total_loss(&a, &b, 1.0, 0.4).unwrap() - combined).abs() < 1e-12);
        assert!((ssim_loss(&a, &b).unwrap() - ssim_loss(&b, &a).unwrap()).abs() < 1e-6);
        assert!(total_loss(&a, &Image::filled(8, 8, [0.0; 3]), 1.0, 0.4).is_err());
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            head_lr: 1e-2,
            encoder_lr: 1e-3,
            seed: 5,
            model: ModelConfig::tiny(),
            ..Default::default()
        }
    }

    fn smoke_config() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            batch_size: 1,
            head_lr: 4e-4,
            encoder_lr: 4e-5,
            seed: 5,
            model: ModelConfig::tiny(),
            ..Default::default()
        }
    }

    fn identity_pool() -> Vec<StylePool> {
        let x = generate_base(6, 1, 16).unwrap().remove(0);
        vec![StylePool::new(x.clone(), vec![x]).unwrap()]
    }

    #[test]
    fn identity_target_stays_at_zero_loss() {
        let out = train(&identity_pool(), &[], &smoke_config(), &TrainOutputs::default()).unwrap();
        assert_eq!(out.log.len(), 50);
        for e in &out.log {
            assert!(e.loss < 1e-4, "{}", e.loss);
        }
    }

    #[test]
    fn overfits_back_to_identity() {
        let cfg = smoke_config();
        let mut model = RetouchModel::new(cfg.model.clone(), cfg.seed).unwrap();
        // Start from a brightening retouch so there is something to undo.
        for v in model.params_mut().get_mut("head.b").unwrap().data_mut() {
            *v += 0.04;
        }
        let out = train_model(model, &identity_pool(), &[], &cfg, &TrainOutputs::default()).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|e| e.loss).collect();
        assert!(losses[0] > 1e-3, "{}", losses[0]);
        for w in losses[5..].windows(2) {
            assert!(w[1] <= w[0], "{losses:?}");
        }
        assert!(*losses.last().unwrap() < 1e-4, "{losses:?}");
    }

    #[test]
    fn training_is_deterministic_and_logs_json() {
        let pools: Vec<_> = (0..3).map(|_| pool(3)).collect();
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str| {
            let outputs = TrainOutputs {
                checkpoint: Some(dir.path().join(format!("{name}.ckpt"))),
                log: Some(dir.path().join(format!("{name}.jsonl"))),
            };
            train(&pools, &pools[..1], &tiny_config(3), &outputs).unwrap();
            (
                std::fs::read(outputs.checkpoint.unwrap()).unwrap(),
                std::fs::read_to_string(outputs.log.unwrap()).unwrap(),
            )
        };
        let (a, b) = (run("a"), run("b"));
        assert_eq!(a, b);
        let lines: Vec<serde_json::Value> = a.1.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0]["val_psnr"].is_number());
    }

    #[test]
    fn nan_loss_names_the_batch() {
        let pools: Vec<_> = (0..3).map(|_| pool(1)).collect();
        let cfg = TrainConfig { batch_size: 1, ..tiny_config(1) };
        let mut model = RetouchModel::new(cfg.model.clone(), 0).unwrap();
        model.params_mut().get_mut("head.b").unwrap().data_mut()[0] = f32::NAN;
        let err = train_model(model, &pools, &[], &cfg, &TrainOutputs::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0 }), "{err}");
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(
            train(&[], &[], &tiny_config(1), &TrainOutputs::default()),
            Err(Error::Empty(_))
        ));
    }
}
