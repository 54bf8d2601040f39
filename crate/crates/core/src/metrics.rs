//! PSNR, SSIM, mean CIE76 color difference, and dataset-level reports.

use std::rc::Rc;

use serde::Serialize;

use crate::autodiff::kernels::gaussian_kernel;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::curves::unique_color_count;
use crate::error::{Error, Result, ShapeError};
use crate::image::{rgb_to_lab, Image};
use crate::model::RetouchModel;
use crate::training::StylePool;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(ShapeError::Mismatch(vec![a.height(), a.width()], vec![b.height(), b.width()]).into());
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Peak signal-to-noise ratio for unit peak; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

/// Mean structural similarity over a `[3,H,W]` pair recorded on `tape`.
///
/// Local statistics use an 11x11 Gaussian window (sigma 1.5) cut at the
/// borders and renormalized, so the map has the input's size.
pub fn ssim_on_tape<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, ShapeError> {
    let k: Rc<Vec<T>> = Rc::new(gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::lit).collect());
    let c1 = T::lit(SSIM_K1 * SSIM_K1);
    let c2 = T::lit(SSIM_K2 * SSIM_K2);
    let two = T::lit(2.0);

    let mu_a = tape.blur(a, k.clone())?;
    let mu_b = tape.blur(b, k.clone())?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.blur(aa, k.clone())?;
    let e_bb = tape.blur(bb, k.clone())?;
    let e_ab = tape.blur(ab, k)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let n1 = tape.scale(mu_ab, two);
    let n1 = tape.add_scalar(n1, c1);
    let n2 = tape.scale(cov, two);
    let n2 = tape.add_scalar(n2, c2);
    let d1 = tape.add(mu_aa, mu_bb)?;
    let d1 = tape.add_scalar(d1, c1);
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.add_scalar(d2, c2);
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let to = |img: &Image| Tensor::<f64>::new(&[3, img.height(), img.width()], img.to_planar().iter().map(|&v| f64::from(v)).collect());
    let mut tape = Tape::<f64>::new();
    let va = tape.constant(to(a)?);
    let vb = tape.constant(to(b)?);
    let s = ssim_on_tape(&mut tape, va, vb)?;
    Ok(tape.value(s).item())
}

/// Mean per-pixel CIE76 distance in Lab.
pub fn mean_delta_e(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (la, lb) = (rgb_to_lab(a), rgb_to_lab(b));
    let total: f64 = la
        .pixels()
        .zip(lb.pixels())
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .sum();
    Ok(total / a.pixel_count() as f64)
}

/// Metrics of one (prediction, target) pair plus color counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
    pub unique_colors_in: usize,
    pub unique_colors_out: usize,
    pub unique_colors_target: usize,
}

pub fn pair_metrics(input: &Image, output: &Image, target: &Image) -> Result<PairMetrics> {
    Ok(PairMetrics {
        psnr: psnr(output, target)?,
        ssim: ssim(output, target)?,
        delta_e: mean_delta_e(output, target)?,
        unique_colors_in: unique_color_count(input),
        unique_colors_out: unique_color_count(&output.clamped()),
        unique_colors_target: unique_color_count(target),
    })
}

/// Unweighted means over a test set. `psnr` is infinite when every pair
/// matches exactly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    #[serde(serialize_with = "finite_or_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub delta_e: f64,
    pub unique_colors_in: f64,
    pub unique_colors_out: f64,
    pub unique_colors_target: f64,
    pub lpips: &'static str,
}

fn finite_or_string<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

pub fn aggregate(pairs: &[PairMetrics]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&PairMetrics) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        count: pairs.len(),
        psnr: mean(&|p| p.psnr),
        ssim: mean(&|p| p.ssim),
        delta_e: mean(&|p| p.delta_e),
        unique_colors_in: mean(&|p| p.unique_colors_in as f64),
        unique_colors_out: mean(&|p| p.unique_colors_out as f64),
        unique_colors_target: mean(&|p| p.unique_colors_target as f64),
        lpips: "not computed (needs a pretrained perceptual network)",
    })
}

/// Metrics of `model` on every (input, version) pair of `pools`, with the
/// text derived from each target.
pub fn evaluate(model: &RetouchModel, pools: &[StylePool]) -> Result<(EvalReport, Vec<PairMetrics>)> {
    let mut pairs = Vec::new();
    for pool in pools {
        for k in 0..pool.versions().len() {
            let s = pool.sample(k)?;
            let out = model.forward_bands(&s.input, Some(&s.bands))?.image;
            pairs.push(pair_metrics(&s.input, &out, &s.target)?);
        }
    }
    Ok((aggregate(&pairs)?, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(12, 9, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn identical_images() {
        let a = random_image(1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(mean_delta_e(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn known_values() {
        let black = Image::filled(4, 4, [0.0; 3]);
        let white = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(mse(&black, &white).unwrap(), 1.0);
        assert!((mean_delta_e(&black, &white).unwrap() - 100.0).abs() < 1e-3);
        let gray = Image::filled(4, 4, [0.1; 3]);
        let p = psnr(&black, &gray).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
    }

    #[test]
    fn symmetric() {
        let (a, b) = (random_image(2), random_image(3));
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!((mean_delta_e(&a, &b).unwrap() - mean_delta_e(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = random_image(2);
        let b = Image::filled(9, 12, [0.0; 3]);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn aggregation_is_mean() {
        let (x, y, z) = (random_image(4), random_image(5), random_image(6));
        let m1 = pair_metrics(&x, &y, &z).unwrap();
        let m2 = pair_metrics(&y, &z, &x).unwrap();
        let r = aggregate(&[m1.clone(), m2.clone()]).unwrap();
        assert_eq!(r.psnr, (m1.psnr + m2.psnr) / 2.0);
        assert_eq!(r.unique_colors_out, (m1.unique_colors_out + m2.unique_colors_out) as f64 / 2.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn identity_model_on_unchanged_pairs() {
        let model = RetouchModel::new(crate::model::ModelConfig::tiny(), 0).unwrap();
        let x = random_image(7).quantized();
        let pool = StylePool::new(x.clone(), vec![x]).unwrap();
        let (r, _) = evaluate(&model, &[pool]).unwrap();
        assert!(r.psnr > 100.0 || r.psnr.is_infinite(), "{}", r.psnr);
        assert!((r.ssim - 1.0).abs() < 1e-6);
        assert!(r.delta_e < 1e-3);
        assert!(evaluate(&model, &[]).is_err());
    }
}
