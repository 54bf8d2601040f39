//! Raw loops shared by tape ops and by their non-differentiable twins.

use super::tensor::Real;

/// Per-pixel softmax over `n` planes of `hw` values, max-subtracted.
pub fn softmax_channels<T: Real>(x: &[T], n: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * hw];
    for p in 0..hw {
        let mut m = x[p];
        for j in 1..n {
            m = m.max(x[j * hw + p]);
        }
        let mut s = T::zero();
        for j in 0..n {
            let e = (x[j * hw + p] - m).exp();
            out[j * hw + p] = e;
            s += e;
        }
        for j in 0..n {
            out[j * hw + p] = out[j * hw + p] / s;
        }
    }
    out
}

/// Lower knot and fraction of `v` on a curve of `l` entries. Positions are
/// clamped to the curve; `inside` is false when clamping happened.
#[inline]
pub fn curve_position<T: Real>(v: T, l: usize) -> (usize, T, bool) {
    let last = T::lit((l - 1) as f64);
    let pos = v * last;
    let inside = pos >= T::zero() && pos <= last;
    let pos = pos.max(T::zero()).min(last);
    let i0 = pos.floor().to_f64() as usize;
    let i0 = i0.min(l - 2);
    (i0, pos - T::lit(i0 as f64), inside)
}

/// Linear interpolation of `curve` at `v * (len - 1)`.
#[inline]
pub fn lookup<T: Real>(curve: &[T], v: T) -> T {
    let (i0, f, _) = curve_position(v, curve.len());
    curve[i0] + (curve[i0 + 1] - curve[i0]) * f
}

/// `curves` is `[3,N,L]`, `img` is planar `[3,hw]`; output is `[N,3,hw]`.
pub fn apply_curves<T: Real>(curves: &[T], n: usize, l: usize, img: &[T], hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * 3 * hw];
    for j in 0..n {
        for c in 0..3 {
            let curve = &curves[(c * n + j) * l..(c * n + j + 1) * l];
            let src = &img[c * hw..(c + 1) * hw];
            let dst = &mut out[(j * 3 + c) * hw..(j * 3 + c + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = lookup(curve, v);
            }
        }
    }
    out
}

pub fn apply_curves_grad_curves<T: Real>(g: &[T], n: usize, l: usize, img: &[T], hw: usize, d: &mut [T]) {
    for j in 0..n {
        for c in 0..3 {
            let dc = &mut d[(c * n + j) * l..(c * n + j + 1) * l];
            let src = &img[c * hw..(c + 1) * hw];
            let gg = &g[(j * 3 + c) * hw..(j * 3 + c + 1) * hw];
            for (&v, &gv) in src.iter().zip(gg) {
                let (i0, f, _) = curve_position(v, l);
                dc[i0] += gv * (T::one() - f);
                dc[i0 + 1] += gv * f;
            }
        }
    }
}

pub fn apply_curves_grad_image<T: Real>(
    g: &[T],
    curves: &[T],
    n: usize,
    l: usize,
    img: &[T],
    hw: usize,
    d: &mut [T],
) {
    let scale = T::lit((l - 1) as f64);
    for j in 0..n {
        for c in 0..3 {
            let curve = &curves[(c * n + j) * l..(c * n + j + 1) * l];
            let src = &img[c * hw..(c + 1) * hw];
            let gg = &g[(j * 3 + c) * hw..(j * 3 + c + 1) * hw];
            let dst = &mut d[c * hw..(c + 1) * hw];
            for p in 0..hw {
                let (i0, _, inside) = curve_position(src[p], l);
                if inside {
                    dst[p] += gg[p] * (curve[i0 + 1] - curve[i0]) * scale;
                }
            }
        }
    }
}

/// `sum_j w[j] * cand[j]` with `w` `[n,hw]` and `cand` `[n,3,hw]`.
pub fn fuse<T: Real>(w: &[T], cand: &[T], n: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 3 * hw];
    for j in 0..n {
        let wj = &w[j * hw..(j + 1) * hw];
        for c in 0..3 {
            let src = &cand[(j * 3 + c) * hw..(j * 3 + c + 1) * hw];
            let dst = &mut out[c * hw..(c + 1) * hw];
            for p in 0..hw {
                dst[p] += wj[p] * src[p];
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian taps of odd `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

// One 1-D pass along a line of `n` samples at `stride`. The window is cut at
// the ends and renormalized by the surviving tap mass; `transpose` applies
// the adjoint of that operator.
fn blur_line<T: Real>(src: &[T], dst: &mut [T], n: usize, stride: usize, k: &[T], transpose: bool, buf: &mut Vec<T>) {
    let r = k.len() / 2;
    buf.clear();
    buf.extend((0..n).map(|i| src[i * stride]));
    let norm = |x: usize| -> T {
        let lo = r.saturating_sub(x);
        let hi = (n + r - x).min(k.len());
        k[lo..hi].iter().copied().sum()
    };
    if transpose {
        for x in 0..n {
            buf[x] = buf[x] / norm(x);
        }
        for x in 0..n {
            dst[x * stride] = T::zero();
        }
        for x in 0..n {
            let g = buf[x];
            for (d, &kv) in k.iter().enumerate() {
                let i = x + d;
                if i >= r && i - r < n {
                    dst[(i - r) * stride] += kv * g;
                }
            }
        }
    } else {
        for x in 0..n {
            let mut acc = T::zero();
            for (d, &kv) in k.iter().enumerate() {
                let i = x + d;
                if i >= r && i - r < n {
                    acc += kv * buf[i - r];
                }
            }
            dst[x * stride] = acc / norm(x);
        }
    }
}

/// Separable blur of `c` planes of `h*w` values.
pub fn blur_planes<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: &[T], transpose: bool) -> Vec<T> {
    let mut tmp = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut buf = Vec::with_capacity(h.max(w));
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            let s = base + y * w;
            blur_line(&x[s..s + w], &mut tmp[s..s + w], w, 1, k, transpose, &mut buf);
        }
        for xx in 0..w {
            let s = base + xx;
            let e = base + (h - 1) * w + xx + 1;
            blur_line(&tmp[s..e], &mut out[s..e], h, w, k, transpose, &mut buf);
        }
    }
    out
}
