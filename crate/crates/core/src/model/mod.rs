//! The retouching network: image and text encoders, multiplicative feature
//! fusion, a linear curve head, a skip-connected weight-map network, and
//! the curve engine that ties them together.

pub mod checkpoint;
mod config;

use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::CheckpointError;
pub use config::ModelConfig;

use crate::attributes::{NUM_ATTRIBUTES, NUM_LEVELS};
use crate::autodiff::gradcheck::{check_gradients, CheckResult};
use crate::autodiff::{ParamSet, Real, Tape, Tensor, Var};
use crate::curves::bicubic_matrix;
use crate::error::{ImageError, Result, ShapeError};
use crate::image::{reflect_pad_to_multiple, resize_bilinear, Image};
use crate::metrics::ssim_on_tape;
use crate::style::parse_text;

/// Learning-rate group of encoder parameters (image and text).
pub const GROUP_ENCODER: usize = 0;
/// Learning-rate group of the curve head and weight network.
pub const GROUP_HEAD: usize = 1;
/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;
const PAD_MULTIPLE: usize = 8;
const CHECKPOINT_KIND: &str = "retouch";

const WEIGHT_LAYERS: [&str; 8] = ["e1", "e2", "e3", "bottom", "d3", "d2", "d1", "out"];

/// Retouched image plus the intermediate quantities that produced it.
#[derive(Debug, Clone)]
pub struct RetouchOutput {
    pub image: Image,
    /// `[3, N, L]` dense curves.
    pub curves: Vec<f32>,
    pub candidates: Vec<Image>,
    /// `[N, H, W]` normalized weights.
    pub weights: Vec<f32>,
}

/// Loss value and parameter gradients of one training example.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub mse: f64,
    pub ssim_loss: f64,
    pub grads: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone)]
pub struct RetouchModel {
    config: ModelConfig,
    params: ParamSet<f32>,
    bicubic: Vec<f64>,
}

// Model inputs in planar layout, computed outside the tape.
struct Prepared {
    height: usize,
    width: usize,
    planar: Tensor<f32>,
    encoder: Tensor<f32>,
    padded: Tensor<f32>,
}

struct Graph {
    output: Var,
    curves: Var,
    candidates: Var,
    weights: Var,
}

fn planar_tensor(img: &Image) -> Tensor<f32> {
    Tensor::new(&[3, img.height(), img.width()], img.to_planar()).expect("image shape")
}

impl RetouchModel {
    /// Randomly initialized model whose forward pass is the identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bicubic = bicubic_matrix(config.p, config.l)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut normal = |shape: &[usize], std: f64| -> Tensor<f32> {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng) as f32).collect()).expect("shape")
        };
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

        let mut prev = 3;
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            params.insert(&format!("image.conv{}.w", i + 1), normal(&[w, prev, 3, 3], he(9 * prev)), GROUP_ENCODER);
            params.insert(&format!("image.conv{}.b", i + 1), Tensor::zeros(&[w]), GROUP_ENCODER);
            prev = w;
        }
        let d = config.d;
        if config.use_text {
            params.insert("text.embed", normal(&[NUM_ATTRIBUTES * NUM_LEVELS, d], 0.4), GROUP_ENCODER);
            params.insert("text.proj.w", normal(&[d, d], (1.0 / d as f64).sqrt()), GROUP_ENCODER);
            // Starts near the multiplicative identity of the fusion.
            params.insert("text.proj.b", Tensor::full(&[d], 1.0), GROUP_ENCODER);
        }
        let rows = 3 * config.n * config.p;
        params.insert("head.w", Tensor::zeros(&[rows, d]), GROUP_HEAD);
        let ramp: Vec<f32> = (0..rows)
            .map(|i| (i % config.p) as f32 / (config.p - 1) as f32)
            .collect();
        params.insert("head.b", Tensor::new(&[rows], ramp)?, GROUP_HEAD);

        if config.use_weight_net {
            let [c1, c2, c3] = config.weight_widths;
            let layers = [
                (c1, 3, 3),
                (c2, c1, 3),
                (c3, c2, 3),
                (c3, c3, 3),
                (c2, 2 * c3, 3),
                (c1, 2 * c2, 3),
                (c1, 2 * c1, 3),
                (config.n, c1, 1),
            ];
            for (name, (out, inp, k)) in WEIGHT_LAYERS.iter().zip(layers) {
                params.insert(&format!("weight.{name}.w"), normal(&[out, inp, k, k], he(k * k * inp)), GROUP_HEAD);
                params.insert(&format!("weight.{name}.b"), Tensor::zeros(&[out]), GROUP_HEAD);
            }
        }
        Ok(Self {
            config,
            params,
            bicubic,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn prepare(&self, img: &Image) -> Result<Prepared> {
        let (h, w) = (img.height(), img.width());
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(ImageError::TooSmall {
                height: h,
                width: w,
                min: MIN_SIDE,
            }
            .into());
        }
        let s = self.config.encoder_size;
        let encoder = planar_tensor(&resize_bilinear(img, s, s));
        let padded = if self.config.use_weight_net && self.config.n > 1 {
            planar_tensor(&reflect_pad_to_multiple(img, PAD_MULTIPLE))
        } else {
            Tensor::zeros(&[1])
        };
        Ok(Prepared {
            height: h,
            width: w,
            planar: planar_tensor(img),
            encoder,
            padded,
        })
    }

    fn bands_for(&self, text: &str) -> Result<Option<[u8; NUM_ATTRIBUTES]>> {
        if self.config.use_text {
            Ok(Some(parse_text(text)?))
        } else {
            Ok(None)
        }
    }

    /// Retouches `img` as directed by an attribute sentence. The text is
    /// ignored when the model was built without a text branch.
    pub fn forward(&self, img: &Image, text: &str) -> Result<RetouchOutput> {
        let bands = self.bands_for(text)?;
        self.forward_bands(img, bands.as_ref())
    }

    pub fn forward_bands(&self, img: &Image, bands: Option<&[u8; NUM_ATTRIBUTES]>) -> Result<RetouchOutput> {
        let input = self.prepare(img)?;
        let mut tape = Tape::<f32>::new();
        let vars = self.params.record(&mut tape, false);
        let g = build(&self.config, &self.bicubic, &self.params, &vars, &mut tape, &input, bands)?;
        let (h, w) = (input.height, input.width);
        let hw = h * w;
        let cands = tape.value(g.candidates).data();
        let candidates = (0..self.config.n)
            .map(|j| Image::from_planar(h, w, &cands[j * 3 * hw..(j + 1) * 3 * hw]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(RetouchOutput {
            image: Image::from_planar(h, w, tape.value(g.output).data())?,
            curves: tape.value(g.curves).data().to_vec(),
            candidates,
            weights: tape.value(g.weights).data().to_vec(),
        })
    }

    /// Image feature `f_x`.
    pub fn encode_image(&self, img: &Image) -> Result<Vec<f32>> {
        let input = self.prepare(img)?;
        let mut tape = Tape::<f32>::new();
        let vars = self.params.record(&mut tape, false);
        let pv = lookup(&self.params, &vars);
        let x = tape.constant(input.encoder.clone());
        let f = image_encoder(&mut tape, &pv, x)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Text feature `f_t`; all ones without a text branch.
    pub fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        let bands = self.bands_for(text)?;
        let mut tape = Tape::<f32>::new();
        let vars = self.params.record(&mut tape, false);
        let pv = lookup(&self.params, &vars);
        let f = text_encoder(&mut tape, &pv, self.config.d, bands.as_ref())?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Control points `[3, N, P]` from the two features.
    pub fn generate_curves(&self, f_x: &[f32], f_t: &[f32]) -> Result<Vec<f32>> {
        let d = self.config.d;
        let mut tape = Tape::<f32>::new();
        let vars = self.params.record(&mut tape, false);
        let pv = lookup(&self.params, &vars);
        let fx = tape.constant(Tensor::new(&[d], f_x.to_vec())?);
        let ft = tape.constant(Tensor::new(&[d], f_t.to_vec())?);
        let f = tape.mul(fx, ft)?;
        let p = tape.dense(f, pv("head.w"), Some(pv("head.b")))?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Weight-map logits `[N, H, W]`; zeros without a weight network.
    pub fn weight_logits(&self, img: &Image) -> Result<Vec<f32>> {
        let input = self.prepare(img)?;
        let n = self.config.n;
        if !self.config.use_weight_net || n == 1 {
            return Ok(vec![0.0; n * input.height * input.width]);
        }
        let mut tape = Tape::<f32>::new();
        let vars = self.params.record(&mut tape, false);
        let pv = lookup(&self.params, &vars);
        let padded = tape.constant(input.padded.clone());
        let logits = weight_net(&mut tape, &pv, padded, input.height, input.width)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// `alpha * MSE + beta * (1 - SSIM)` against `target`, with gradients
    /// for every parameter in insertion order.
    pub fn loss_and_grads(
        &self,
        img: &Image,
        bands: Option<&[u8; NUM_ATTRIBUTES]>,
        target: &Image,
        alpha: f64,
        beta: f64,
    ) -> Result<LossGrads> {
        if img.height() != target.height() || img.width() != target.width() {
            return Err(ShapeError::Mismatch(
                vec![img.height(), img.width()],
                vec![target.height(), target.width()],
            )
            .into());
        }
        let input = self.prepare(img)?;
        let mut tape = Tape::<f32>::new();
        let vars = self.params.record(&mut tape, true);
        let g = build(&self.config, &self.bicubic, &self.params, &vars, &mut tape, &input, bands)?;
        let y = tape.constant(planar_tensor(target));
        let (loss, mse, ssim) = total_loss(&mut tape, g.output, y, alpha, beta)?;
        let grads = tape.backward(loss)?;
        Ok(LossGrads {
            loss: f64::from(tape.value(loss).item()),
            mse: f64::from(tape.value(mse).item()),
            ssim_loss: 1.0 - f64::from(tape.value(ssim).item()),
            grads: vars.iter().map(|&v| grads.wrt(v)).collect(),
        })
    }

    /// Finite-difference check of the full loss with respect to every
    /// parameter tensor, in double precision.
    pub fn gradient_check(
        &self,
        img: &Image,
        bands: Option<&[u8; NUM_ATTRIBUTES]>,
        target: &Image,
        alpha: f64,
        beta: f64,
        seed: u64,
    ) -> Result<Vec<CheckResult>> {
        let input = self.prepare(img)?;
        let params64: ParamSet<f64> = self.params.cast();
        let target = planar_tensor(target).cast::<f64>();
        let mut results = Vec::new();
        for (i, name) in self.params.names().iter().enumerate() {
            let f = |tape: &mut Tape<f64>, checked: &[Var]| -> std::result::Result<Var, ShapeError> {
                let vars: Vec<Var> = (0..params64.len())
                    .map(|k| {
                        if k == i {
                            checked[0]
                        } else {
                            tape.constant(params64.tensors()[k].clone())
                        }
                    })
                    .collect();
                let g = build(&self.config, &self.bicubic, &params64, &vars, tape, &input, bands)?;
                let y = tape.constant(target.clone());
                Ok(total_loss(tape, g.output, y, alpha, beta)?.0)
            };
            let r = check_gradients(&format!("model.{name}"), &[params64.tensors()[i].clone()], f, seed + i as u64)?;
            results.push(r);
        }
        Ok(results)
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(CHECKPOINT_KIND, self.config_json(), &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, tensors) = checkpoint::decode(bytes)?;
        if manifest.kind != CHECKPOINT_KIND {
            return Err(CheckpointError::Kind {
                expected: CHECKPOINT_KIND.into(),
                found: manifest.kind,
            }
            .into());
        }
        let config: ModelConfig =
            serde_json::from_value(manifest.config).map_err(|e| CheckpointError::Config(e.to_string()))?;
        config
            .validate()
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        checkpoint::fill(&mut model.params, tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(checkpoint::write_file(path.as_ref(), &self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path.as_ref())?)
    }
}

fn lookup<'a, T: Real>(params: &'a ParamSet<T>, vars: &'a [Var]) -> impl Fn(&str) -> Var + 'a {
    move |name| vars[params.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
}

fn conv_relu<T: Real>(tape: &mut Tape<T>, pv: &dyn Fn(&str) -> Var, x: Var, layer: &str, stride: usize) -> Result<Var, ShapeError> {
    let y = tape.conv2d(x, pv(&format!("{layer}.w")), Some(pv(&format!("{layer}.b"))), stride)?;
    Ok(tape.relu(y))
}

fn image_encoder<T: Real>(tape: &mut Tape<T>, pv: &dyn Fn(&str) -> Var, x: Var) -> Result<Var, ShapeError> {
    let mut h = x;
    for i in 1..=4 {
        h = conv_relu(tape, pv, h, &format!("image.conv{i}"), 2)?;
    }
    tape.mean_pool(h)
}

fn text_encoder<T: Real>(
    tape: &mut Tape<T>,
    pv: &dyn Fn(&str) -> Var,
    d: usize,
    bands: Option<&[u8; NUM_ATTRIBUTES]>,
) -> Result<Var, ShapeError> {
    let Some(bands) = bands else {
        return Ok(tape.constant(Tensor::full(&[d], T::one())));
    };
    let rows: Vec<usize> = bands
        .iter()
        .enumerate()
        .map(|(i, &b)| i * NUM_LEVELS + usize::from(b).clamp(1, NUM_LEVELS) - 1)
        .collect();
    let e = tape.gather_sum_rows(pv("text.embed"), &rows)?;
    tape.dense(e, pv("text.proj.w"), Some(pv("text.proj.b")))
}

fn weight_net<T: Real>(tape: &mut Tape<T>, pv: &dyn Fn(&str) -> Var, x: Var, h: usize, w: usize) -> Result<Var, ShapeError> {
    let e1 = conv_relu(tape, pv, x, "weight.e1", 1)?;
    let e2 = conv_relu(tape, pv, e1, "weight.e2", 2)?;
    let e3 = conv_relu(tape, pv, e2, "weight.e3", 2)?;
    let b = conv_relu(tape, pv, e3, "weight.bottom", 2)?;
    let mut up = b;
    for (skip, layer) in [(e3, "weight.d3"), (e2, "weight.d2"), (e1, "weight.d1")] {
        let u = tape.upsample2x(up)?;
        let cat = tape.concat(&[u, skip])?;
        up = conv_relu(tape, pv, cat, layer, 1)?;
    }
    let logits = tape.conv2d(up, pv("weight.out.w"), Some(pv("weight.out.b")), 1)?;
    tape.crop(logits, h, w)
}

fn build<T: Real>(
    config: &ModelConfig,
    bicubic: &[f64],
    params: &ParamSet<T>,
    vars: &[Var],
    tape: &mut Tape<T>,
    input: &Prepared,
    bands: Option<&[u8; NUM_ATTRIBUTES]>,
) -> Result<Graph, ShapeError> {
    let pv = lookup(params, vars);
    let (n, p, l) = (config.n, config.p, config.l);
    let (h, w) = (input.height, input.width);

    let enc_in = tape.constant(input.encoder.cast());
    let f_x = image_encoder(tape, &pv, enc_in)?;
    let f_t = text_encoder(tape, &pv, config.d, bands.filter(|_| config.use_text))?;
    let f = tape.mul(f_x, f_t)?;
    let ctrl = tape.dense(f, pv("head.w"), Some(pv("head.b")))?;
    let ctrl = tape.reshape(ctrl, &[3 * n, p])?;
    let matrix = Rc::new(bicubic.iter().map(|&v| T::lit(v)).collect::<Vec<T>>());
    let dense = tape.linear_const(ctrl, matrix, l)?;
    let curves = tape.reshape(dense, &[3, n, l])?;

    let image = tape.constant(input.planar.cast());
    let candidates = tape.apply_curves(curves, image)?;

    let logits = if config.use_weight_net && n > 1 {
        let padded = tape.constant(input.padded.cast());
        weight_net(tape, &pv, padded, h, w)?
    } else {
        tape.constant(Tensor::zeros(&[n, h, w]))
    };
    let weights = tape.softmax_channels(logits)?;
    let output = tape.weighted_fuse(weights, candidates)?;
    Ok(Graph {
        output,
        curves,
        candidates,
        weights,
    })
}

/// Returns `(total, mse, ssim)` nodes.
pub(crate) fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    alpha: f64,
    beta: f64,
) -> Result<(Var, Var, Var), ShapeError> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq);
    let ssim = ssim_on_tape(tape, pred, target)?;
    let a = tape.scale(mse, T::lit(alpha));
    let b = tape.scale(ssim, T::lit(-beta));
    let b = tape.add_scalar(b, T::lit(beta));
    let total = tape.add(a, b)?;
    Ok((total, mse, ssim))
}
