//! Attribute target predictor: a 6-32-32-6 ReLU MLP from input levels to
//! the levels a user is expected to want.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attributes::NUM_ATTRIBUTES;
use crate::autodiff::{cosine_factor, Adam, ParamSet, Real, Tape, Tensor, Var};
use crate::error::{Error, Result, ShapeError};
use crate::model::checkpoint::{self, CheckpointError};

pub const HIDDEN: usize = 32;
const KIND: &str = "atp";
const LAYERS: [(&str, usize, usize); 3] = [
    ("fc1", HIDDEN, NUM_ATTRIBUTES),
    ("fc2", HIDDEN, HIDDEN),
    ("fc3", NUM_ATTRIBUTES, HIDDEN),
];

pub type Levels = [f64; NUM_ATTRIBUTES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtpTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AtpTrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 32,
            lr: 2e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtpModel {
    params: ParamSet<f32>,
}

impl AtpModel {
    fn with(mut init: impl FnMut(&str, &[usize]) -> Tensor<f32>) -> Self {
        let mut params = ParamSet::new();
        for (name, out, inp) in LAYERS {
            let w = format!("{name}.w");
            let b = format!("{name}.b");
            params.insert(&w, init(&w, &[out, inp]), 0);
            params.insert(&b, init(&b, &[out]), 0);
        }
        Self { params }
    }

    /// He-normal weights and zero biases.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with(|name, shape| {
            if name.ends_with(".b") {
                return Tensor::zeros(shape);
            }
            let dist = Normal::new(0.0, (2.0 / shape[1] as f64).sqrt()).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng) as f32).collect()).expect("shape")
        })
    }

    pub fn zeros() -> Self {
        Self::with(|_, shape| Tensor::zeros(shape))
    }

    /// Passes levels straight through: the first six hidden units copy the
    /// (non-negative) inputs and the last layer reads them back.
    pub fn identity() -> Self {
        Self::with(|name, shape| {
            let mut t = Tensor::zeros(shape);
            if name.ends_with(".w") {
                let cols = shape[1];
                for i in 0..NUM_ATTRIBUTES {
                    t.data_mut()[i * cols + i] = 1.0;
                }
            }
            t
        })
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    /// Predicted target levels, clamped to `[1, 5]`.
    pub fn predict(&self, levels: &Levels) -> Levels {
        let mut tape = Tape::<f32>::new();
        let vars = self.params.record(&mut tape, false);
        let x = tape.constant(Tensor::new(&[1, NUM_ATTRIBUTES], levels.map(|v| v as f32).to_vec()).expect("shape"));
        let y = mlp(&mut tape, &vars, x).expect("fixed shapes");
        let out = tape.value(y).data();
        std::array::from_fn(|i| f64::from(out[i]).clamp(1.0, 5.0))
    }

    /// Mean absolute error of clamped predictions.
    pub fn mae(&self, pairs: &[(Levels, Levels)]) -> f64 {
        let total: f64 = pairs
            .iter()
            .map(|(x, y)| {
                let p = self.predict(x);
                p.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>()
            })
            .sum();
        total / (pairs.len() * NUM_ATTRIBUTES).max(1) as f64
    }

    /// Minimizes the mean squared error with Adam on random minibatches.
    /// Returns the model and the loss after every step.
    pub fn train(pairs: &[(Levels, Levels)], config: &AtpTrainConfig) -> Result<(Self, Vec<f64>)> {
        if pairs.is_empty() {
            return Err(Error::Empty("preference dataset"));
        }
        if config.batch_size == 0 || config.steps == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        let mut model = Self::new(config.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa7b);
        let mut adam = Adam::new(&model.params, vec![config.lr]);
        let batch = config.batch_size.min(pairs.len());
        let mut losses = Vec::with_capacity(config.steps);
        for step in 0..config.steps {
            let idx: Vec<usize> = if batch == pairs.len() {
                (0..batch).collect()
            } else {
                (0..batch).map(|_| rng.random_range(0..pairs.len())).collect()
            };
            let xs: Vec<f32> = idx.iter().flat_map(|&i| pairs[i].0.map(|v| v as f32)).collect();
            let ys: Vec<f32> = idx.iter().flat_map(|&i| pairs[i].1.map(|v| v as f32)).collect();
            let mut tape = Tape::<f32>::new();
            let vars = model.params.record(&mut tape, true);
            let x = tape.constant(Tensor::new(&[batch, NUM_ATTRIBUTES], xs)?);
            let y = tape.constant(Tensor::new(&[batch, NUM_ATTRIBUTES], ys)?);
            let pred = mlp(&mut tape, &vars, x)?;
            let d = tape.sub(pred, y)?;
            let sq = tape.mul(d, d)?;
            let loss = tape.mean(sq);
            let lv = f64::from(tape.value(loss).item());
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: 0, batch: step });
            }
            losses.push(lv);
            let g = tape.backward(loss)?;
            let grads: Vec<_> = vars.iter().map(|&v| g.wrt(v)).collect();
            adam.step(&mut model.params, &grads, cosine_factor(step, config.steps))?;
        }
        Ok((model, losses))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::json!({ "layers": [NUM_ATTRIBUTES, HIDDEN, HIDDEN, NUM_ATTRIBUTES] });
        checkpoint::encode(KIND, config, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, tensors) = checkpoint::decode(bytes)?;
        if manifest.kind != KIND {
            return Err(CheckpointError::Kind {
                expected: KIND.into(),
                found: manifest.kind,
            }
            .into());
        }
        let mut model = Self::zeros();
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

fn mlp<T: Real>(tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var, ShapeError> {
    let h = tape.dense(x, vars[0], Some(vars[1]))?;
    let h = tape.relu(h);
    let h = tape.dense(h, vars[2], Some(vars[3]))?;
    let h = tape.relu(h);
    tape.dense(h, vars[4], Some(vars[5]))
}

/// The synthetic preference "one level up, capped at 5".
pub fn plus_one_rule(levels: &Levels) -> Levels {
    levels.map(|v| (v + 1.0).min(5.0))
}

/// Uniformly random integer level vectors.
pub fn random_levels(rng: &mut impl rand::Rng, count: usize) -> Vec<Levels> {
    (0..count)
        .map(|_| std::array::from_fn(|_| f64::from(rng.random_range(1u8..=5))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule_pairs(seed: u64, n: usize) -> Vec<(Levels, Levels)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_levels(&mut rng, n).into_iter().map(|x| (x, plus_one_rule(&x))).collect()
    }

    #[test]
    fn zero_model_clamps_to_one() {
        assert_eq!(AtpModel::zeros().predict(&[3.0, 2.0, 5.0, 1.0, 4.0, 2.5]), [1.0; 6]);
    }

    #[test]
    fn identity_model() {
        let x = [3.0, 2.0, 5.0, 1.0, 4.0, 2.5];
        assert_eq!(AtpModel::identity().predict(&x), x);
    }

    #[test]
    fn predictions_stay_in_range() {
        let m = AtpModel::new(4);
        for x in [[1.0; 6], [5.0; 6], [-100.0; 6], [100.0; 6]] {
            assert!(m.predict(&x).iter().all(|v| (1.0..=5.0).contains(v)));
        }
    }

    #[test]
    fn overfits_a_single_pair() {
        let pair = ([2.0, 3.0, 4.0, 1.0, 5.0, 3.0], [3.0, 3.5, 2.0, 1.0, 4.0, 5.0]);
        let cfg = AtpTrainConfig { steps: 500, batch_size: 1, lr: 1e-2, seed: 1 };
        let (_, losses) = AtpModel::train(&[pair], &cfg).unwrap();
        assert!(*losses.last().unwrap() < 1e-3, "{}", losses.last().unwrap());
    }

    #[test]
    fn constant_target() {
        let target = [4.0, 2.0, 3.0, 3.0, 1.5, 4.5];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<_> = random_levels(&mut rng, 64).into_iter().map(|x| (x, target)).collect();
        let cfg = AtpTrainConfig::default();
        let (m, _) = AtpModel::train(&pairs, &cfg).unwrap();
        for (x, _) in pairs.iter().take(10) {
            for (p, t) in m.predict(x).iter().zip(target) {
                assert!((p - t).abs() < 0.05, "{p} vs {t}");
            }
        }
    }

    #[test]
    fn seeds_differ_but_both_fit() {
        let pairs = rule_pairs(3, 512);
        let cfg = AtpTrainConfig::default();
        let (a, la) = AtpModel::train(&pairs, &AtpTrainConfig { seed: 1, ..cfg.clone() }).unwrap();
        let (b, lb) = AtpModel::train(&pairs, &AtpTrainConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.to_bytes(), b.to_bytes());
        let tail = |l: &[f64]| l[l.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(tail(&la) < 1e-2, "{}", tail(&la));
        assert!(tail(&lb) < 1e-2, "{}", tail(&lb));
    }

    #[test]
    fn empty_dataset() {
        assert!(matches!(AtpModel::train(&[], &AtpTrainConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = AtpModel::new(7);
        assert_eq!(AtpModel::from_bytes(&m.to_bytes()).unwrap(), m);
    }
}
