//! Central finite-difference verification of tape gradients.

use std::rc::Rc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::kernels::gaussian_kernel;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::ShapeError;

pub const FD_STEP: f64 = 1e-4;
pub const SAMPLES_PER_INPUT: usize = 5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub samples: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences on random elements of every input.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], f: F, seed: u64) -> Result<CheckResult, ShapeError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, ShapeError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, ShapeError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut samples = 0;
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        let n = inputs[i].numel();
        for _ in 0..SAMPLES_PER_INPUT.min(n) {
            let k = rng.random_range(0..n);
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
            samples += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        samples,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

// Random projection to a scalar so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, ShapeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = random(&mut rng, tape.shape(y), -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Gradient checks for every individual tape op on small random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>, ShapeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, ShapeError>| {
        let s = seed.wrapping_add(results.len() as u64);
        let r = check_gradients(name, &inputs, |t, v| f(t, v).and_then(|y| project(t, y, s)), s)?;
        results.push(r);
        Ok::<(), ShapeError>(())
    };

    let a = random(&mut rng, &[4, 5], -1.0, 1.0);
    let b = random(&mut rng, &[4, 5], 0.5, 1.5);
    run("add", vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]))?;
    run("sub", vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]))?;
    run("mul", vec![a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]))?;
    run("div", vec![a.clone(), b.clone()], &|t, v| t.div(v[0], v[1]))?;
    run("scale", vec![a.clone()], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    run("add_scalar", vec![a.clone()], &|t, v| Ok(t.add_scalar(v[0], 0.3)))?;
    run("sum", vec![a.clone()], &|t, v| Ok(t.sum(v[0])))?;
    run("mean", vec![a.clone()], &|t, v| Ok(t.mean(v[0])))?;
    run("relu", vec![random(&mut rng, &[20], 0.01, 1.0).map(|x| if x < 0.5 { -x } else { x })], &|t, v| {
        Ok(t.relu(v[0]))
    })?;
    run("sigmoid", vec![a.clone()], &|t, v| Ok(t.sigmoid(v[0])))?;
    run("reshape", vec![a.clone()], &|t, v| t.reshape(v[0], &[2, 10]))?;

    let x = random(&mut rng, &[3, 6], -1.0, 1.0);
    let w = random(&mut rng, &[4, 6], -1.0, 1.0);
    let bias = random(&mut rng, &[4], -1.0, 1.0);
    run("dense", vec![x, w, bias], &|t, v| t.dense(v[0], v[1], Some(v[2])))?;
    let m: Rc<Vec<f64>> = Rc::new((0..12).map(|i| (i as f64 * 0.37).sin()).collect());
    run("linear_const", vec![random(&mut rng, &[2, 3, 4], -1.0, 1.0)], &move |t, v| {
        t.linear_const(v[0], m.clone(), 3)
    })?;

    let img = random(&mut rng, &[3, 8, 8], 0.0, 1.0);
    let k3 = random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b4 = random(&mut rng, &[4], -0.5, 0.5);
    run("conv2d", vec![img.clone(), k3.clone(), b4.clone()], &|t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1)
    })?;
    run("conv2d_stride2", vec![img.clone(), k3, b4], &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2))?;
    run("conv2d_1x1", vec![img.clone(), random(&mut rng, &[2, 3, 1, 1], -1.0, 1.0)], &|t, v| {
        t.conv2d(v[0], v[1], None, 1)
    })?;
    run("upsample2x", vec![random(&mut rng, &[2, 4, 4], -1.0, 1.0)], &|t, v| t.upsample2x(v[0]))?;
    run(
        "concat",
        vec![random(&mut rng, &[2, 4, 4], -1.0, 1.0), random(&mut rng, &[1, 4, 4], -1.0, 1.0)],
        &|t, v| t.concat(&[v[0], v[1]]),
    )?;
    run("crop", vec![random(&mut rng, &[2, 8, 8], -1.0, 1.0)], &|t, v| t.crop(v[0], 5, 7))?;
    run("mean_pool", vec![img.clone()], &|t, v| t.mean_pool(v[0]))?;
    run("softmax_channels", vec![random(&mut rng, &[5, 4, 4], -2.0, 2.0)], &|t, v| {
        t.softmax_channels(v[0])
    })?;
    run("gather_sum_rows", vec![random(&mut rng, &[30, 8], -1.0, 1.0)], &|t, v| {
        t.gather_sum_rows(v[0], &[2, 7, 12, 17, 22, 27])
    })?;

    // Image values on the knots would sit on derivative jumps; keep them off.
    let l = 16;
    let knot_safe = random(&mut rng, &[3, 8, 8], 0.0, 1.0).map(|v| {
        let pos = v * (l - 1) as f64;
        let frac = pos - pos.floor();
        (pos.floor() + 0.1 + 0.8 * frac) / (l - 1) as f64
    });
    run("apply_curves", vec![random(&mut rng, &[3, 2, l], -1.0, 2.0), knot_safe], &|t, v| {
        t.apply_curves(v[0], v[1])
    })?;
    run(
        "weighted_fuse",
        vec![random(&mut rng, &[3, 8, 8], 0.0, 1.0), random(&mut rng, &[3, 3, 8, 8], 0.0, 1.0)],
        &|t, v| t.weighted_fuse(v[0], v[1]),
    )?;
    let kernel: Rc<Vec<f64>> = Rc::new(gaussian_kernel(11, 1.5));
    run("blur", vec![img], &move |t, v| t.blur(v[0], kernel.clone()))?;
    Ok(results)
}
