//! Dense tone curves from sparse control points, curve lookup, softmax
//! blending and the unique-color count.

use std::collections::HashSet;

use crate::autodiff::kernels;
use crate::error::{Error, ImageError, Result};
use crate::image::{quantize, Image};

pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn keys_kernel(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Row-major `[l, p]` matrix taking `p` control points to `l` samples.
///
/// Output `i` samples position `t = i (p-1)/(l-1)`. Beyond the ends the
/// control sequence is extended linearly (`p[-1] = 2 p[0] - p[1]`), so
/// linear ramps are reproduced everywhere and endpoints map exactly.
pub fn bicubic_matrix(p: usize, l: usize) -> Result<Vec<f64>> {
    if p < 4 {
        return Err(Error::Config(format!("bicubic upsampling needs at least 4 control points, got {p}")));
    }
    if l < 2 {
        return Err(Error::Config(format!("curve length must be at least 2, got {l}")));
    }
    let mut m = vec![0.0; l * p];
    for i in 0..l {
        let t = i as f64 * (p - 1) as f64 / (l - 1) as f64;
        let base = (t.floor() as usize).min(p - 2);
        let f = t - base as f64;
        let row = &mut m[i * p..(i + 1) * p];
        for off in -1isize..=2 {
            let w = keys_kernel(f - off as f64);
            if w == 0.0 {
                continue;
            }
            let j = base as isize + off;
            if j < 0 {
                row[0] += 2.0 * w;
                row[1] -= w;
            } else if j as usize >= p {
                row[p - 1] += 2.0 * w;
                row[p - 2] -= w;
            } else {
                row[j as usize] += w;
            }
        }
    }
    Ok(m)
}

/// Upsamples each row of `rows` × `p` control points to `l` samples.
pub fn bicubic_upsample(params: &[f64], p: usize, l: usize) -> Result<Vec<f64>> {
    if p == 0 || params.len() % p != 0 {
        return Err(Error::Config(format!("{} control values are not rows of {p}", params.len())));
    }
    let m = bicubic_matrix(p, l)?;
    let mut out = Vec::with_capacity(params.len() / p * l);
    for row in params.chunks_exact(p) {
        for i in 0..l {
            out.push(m[i * p..(i + 1) * p].iter().zip(row).map(|(a, b)| a * b).sum());
        }
    }
    Ok(out)
}

/// The identity curve `entry_l = l / (len-1)`.
pub fn identity_curve(len: usize) -> Vec<f32> {
    (0..len).map(|l| l as f32 / (len - 1) as f32).collect()
}

/// Maps every channel through its own curve with linear interpolation.
/// The result is not clamped.
pub fn apply_curve(img: &Image, curves: [&[f32]; 3]) -> Result<Image> {
    if curves.iter().any(|c| c.len() < 2) {
        return Err(Error::Config("curves need at least 2 entries".into()));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|px| (0..3).map(move |c| kernels::lookup(curves[c], px[c])))
        .collect();
    Ok(Image::new(img.height(), img.width(), data)?)
}

/// Per-pixel softmax over `n` logit planes of `hw` values.
pub fn softmax_normalize(logits: &[f32], n: usize, hw: usize) -> Result<Vec<f32>> {
    if n == 0 || logits.len() != n * hw {
        return Err(Error::Config(format!("{} logits are not {n} planes of {hw}", logits.len())));
    }
    Ok(kernels::softmax_channels(logits, n, hw))
}

/// Convex blend of candidates with normalized weight planes (`[n, h*w]`).
pub fn fuse(candidates: &[Image], weights: &[f32]) -> Result<Image> {
    let first = candidates.first().ok_or(Error::Empty("candidate set"))?;
    let (h, w) = (first.height(), first.width());
    let hw = h * w;
    if let Some(c) = candidates.iter().find(|c| c.height() != h || c.width() != w) {
        return Err(ImageError::BadBuffer {
            height: h,
            width: w,
            got: c.data().len(),
        }
        .into());
    }
    if weights.len() != candidates.len() * hw {
        return Err(Error::Config(format!(
            "{} weights do not cover {} candidates of {hw} pixels",
            weights.len(),
            candidates.len()
        )));
    }
    let mut out = vec![0.0f32; 3 * hw];
    for (j, cand) in candidates.iter().enumerate() {
        for (p, px) in cand.data().chunks_exact(3).enumerate() {
            let wj = weights[j * hw + p];
            for c in 0..3 {
                out[3 * p + c] += wj * px[c];
            }
        }
    }
    Ok(Image::new(h, w, out)?)
}

/// Number of distinct 8-bit RGB triples.
pub fn unique_color_count(img: &Image) -> usize {
    img.pixels()
        .map(|px| px.map(quantize))
        .collect::<HashSet<[u8; 3]>>()
        .len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_controls() {
        let out = bicubic_upsample(&[0.5; 64], 64, 256).unwrap();
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn ramp_is_reproduced() {
        let ramp: Vec<f64> = (0..64).map(|k| k as f64 / 63.0).collect();
        let out = bicubic_upsample(&ramp, 64, 256).unwrap();
        for (l, v) in out.iter().enumerate() {
            assert!((v - l as f64 / 255.0).abs() < 1e-6, "{l}: {v}");
        }
    }

    // Direct cubic convolution over the linearly extended control sequence.
    fn direct(params: &[f64], t: f64) -> f64 {
        let p = params.len() as isize;
        let at = |j: isize| -> f64 {
            if j < 0 {
                2.0 * params[0] - params[1]
            } else if j >= p {
                2.0 * params[(p - 1) as usize] - params[(p - 2) as usize]
            } else {
                params[j as usize]
            }
        };
        let lo = t.floor() as isize - 2;
        (lo..=lo + 5).map(|j| at(j) * keys_kernel(t - j as f64)).sum()
    }

    #[test]
    fn impulse_matches_direct_convolution() {
        let mut params = vec![0.0; 64];
        params[10] = 1.0;
        let out = bicubic_upsample(&params, 64, 256).unwrap();
        for (l, v) in out.iter().enumerate() {
            let t = l as f64 * 63.0 / 255.0;
            assert!((v - direct(&params, t)).abs() < 1e-9, "{l}");
        }
    }

    #[test]
    fn too_few_controls() {
        assert!(bicubic_matrix(3, 256).is_err());
    }

    #[test]
    fn curve_lookups() {
        let img = Image::from_fn(3, 4, |y, x| [(y * 4 + x) as f32 / 11.0, 0.25, 1.0]);
        let id = identity_curve(256);
        let out = apply_curve(&img, [&id, &id, &id]).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let zero = vec![0.0f32; 256];
        let out = apply_curve(&img, [&zero, &zero, &zero]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let inv: Vec<f32> = id.iter().map(|v| 1.0 - v).collect();
        let px = apply_curve(&Image::filled(1, 1, [0.25; 3]), [&inv, &inv, &inv]).unwrap();
        assert!((px.data()[0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_cases() {
        let w = softmax_normalize(&[0.3; 5], 5, 1).unwrap();
        assert!(w.iter().all(|&v| (v - 0.2).abs() < 1e-7));
        let w = softmax_normalize(&[50.0, 0.0, 0.0, 0.0, 0.0], 5, 1).unwrap();
        assert!(w[0] > 1.0 - 1e-6);
        assert!(softmax_normalize(&[], 0, 0).is_err());
    }

    #[test]
    fn fuse_cases() {
        let img = Image::from_fn(2, 3, |y, x| [y as f32 * 0.3, x as f32 * 0.2, 0.9]);
        assert_eq!(fuse(&[img.clone()], &[1.0; 6]).unwrap(), img);
        let out = fuse(&[Image::filled(2, 2, [0.0; 3]), Image::filled(2, 2, [1.0; 3])], &[0.5; 8]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        assert!(fuse(&[img.clone(), Image::filled(3, 2, [0.0; 3])], &[0.5; 12]).is_err());
    }

    #[test]
    fn counts_distinct_triples() {
        let (a, b, c) = ([0.1, 0.2, 0.3], [0.9, 0.0, 0.5], [0.0, 0.0, 0.0]);
        let img = Image::from_fn(2, 2, |y, x| match (y, x) {
            (0, 0) | (0, 1) => a,
            (1, 0) => b,
            _ => c,
        });
        assert_eq!(unique_color_count(&img), 3);
    }

    proptest! {
        #[test]
        fn endpoints_are_preserved(params in proptest::collection::vec(-2.0f64..2.0, 4..40), l in 2usize..300) {
            let p = params.len();
            let out = bicubic_upsample(&params, p, l).unwrap();
            prop_assert!((out[0] - params[0]).abs() < 1e-9);
            prop_assert!((out[l - 1] - params[p - 1]).abs() < 1e-9);
        }

        #[test]
        fn fusion_stays_in_envelope(seed in 0u64..1000) {
            use rand::{RngExt, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let cands: Vec<Image> = (0..n)
                .map(|_| Image::from_fn(3, 3, |_, _| [rng.random(), rng.random(), rng.random()]))
                .collect();
            let logits: Vec<f32> = (0..n * 9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = softmax_normalize(&logits, n, 9).unwrap();
            let out = fuse(&cands, &w).unwrap();
            for i in 0..27 {
                let lo = cands.iter().map(|c| c.data()[i]).fold(f32::MAX, f32::min);
                let hi = cands.iter().map(|c| c.data()[i]).fold(f32::MIN, f32::max);
                prop_assert!(out.data()[i] >= lo - 1e-6 && out.data()[i] <= hi + 1e-6);
            }
        }
    }
}
