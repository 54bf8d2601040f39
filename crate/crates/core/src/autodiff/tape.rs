//! Tensor-level reverse-mode tape.
//!
//! Every op appends one node holding its forward value and the parent links
//! needed for the vector-Jacobian product. Nodes are created in execution
//! order, so iterating them backwards is a valid reverse topological order.

use std::rc::Rc;

use super::kernels;
use super::tensor::{matmul, Real, Tensor};
use crate::error::ShapeError;
use crate::image::reflect_index;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    LinearConst {
        x: Var,
        matrix: Rc<Vec<T>>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Upsample2x(Var),
    Concat(Vec<Var>),
    Crop(Var),
    MeanPool(Var),
    SoftmaxChannels(Var),
    GatherSumRows {
        table: Var,
        rows: Vec<usize>,
    },
    ApplyCurves {
        curves: Var,
        image: Var,
    },
    WeightedFuse {
        weights: Var,
        candidates: Var,
    },
    Blur {
        x: Var,
        kernel: Rc<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(a: &[usize], b: &[usize]) -> ShapeError {
    ShapeError::Mismatch(a.to_vec(), b.to_vec())
}

fn invalid(msg: impl Into<String>) -> ShapeError {
    ShapeError::Invalid(msg.into())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(), ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var, ShapeError> {
        self.same_shape(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let req = self.needs(&[a, b]);
        Ok(self.push(value, op, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let req = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), req)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let req = self.needs(&[a]);
        self.push(value, Op::AddScalar(a), req)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let req = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), req)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::lit(t.numel() as f64);
        let req = self.needs(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let req = self.needs(&[a]);
        self.push(value, Op::Relu(a), req)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let req = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), req)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let value = self.value(a).clone().reshaped(shape)?;
        let req = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), req))
    }

    /// Affine map `x W^T + b`; `x` is `[in]` or `[rows, in]`, `w` is `[out, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ShapeError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(invalid(format!("dense weight must be 2-D, got {ws:?}")));
        }
        let (out, inp) = (ws[0], ws[1]);
        let rows = match xs.as_slice() {
            [n] if *n == inp => 1,
            [r, n] if *n == inp => *r,
            _ => return Err(mismatch(&xs, &ws)),
        };
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(mismatch(self.shape(b), &[out]));
            }
        }
        let mut y = vec![T::zero(); rows * out];
        matmul(rows, inp, out, self.value(x).data(), false, self.value(w).data(), true, &mut y, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v += bb;
                }
            }
        }
        let shape = if xs.len() == 1 { vec![out] } else { vec![rows, out] };
        let mut parents = vec![x, w];
        parents.extend(b);
        let req = self.needs(&parents);
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::Dense {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            req,
        ))
    }

    /// Applies a fixed `[out, in]` matrix along the last axis.
    pub fn linear_const(&mut self, x: Var, matrix: Rc<Vec<T>>, out: usize) -> Result<Var, ShapeError> {
        let xs = self.shape(x).to_vec();
        let inp = *xs.last().expect("non-empty shape");
        if matrix.len() != out * inp {
            return Err(invalid(format!("matrix of {} values is not {out}x{inp}", matrix.len())));
        }
        let rows = self.value(x).numel() / inp;
        let mut y = vec![T::zero(); rows * out];
        matmul(rows, inp, out, self.value(x).data(), false, &matrix, true, &mut y, false);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = out;
        let req = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::LinearConst {
                x,
                matrix,
                rows,
                inp,
                out,
            },
            req,
        ))
    }

    /// 2-D convolution over `[C,H,W]` with an odd `[O,C,k,k]` kernel,
    /// reflection padding of `k/2` and the given stride.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, ShapeError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (c, h, wd) = match xs.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(invalid(format!("conv2d input must be [C,H,W], got {xs:?}"))),
        };
        let (o, k) = match ws.as_slice() {
            [o, ci, k, k2] if *ci == c && k == k2 && k % 2 == 1 => (*o, *k),
            _ => return Err(mismatch(&xs, &ws)),
        };
        if stride == 0 {
            return Err(invalid("stride must be positive"));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(mismatch(self.shape(b), &[o]));
            }
        }
        let geom = ConvGeom::new(h, wd, k, stride);
        let ohw = geom.oh * geom.ow;
        let cols = geom.im2col(self.value(x).data(), c);
        let mut y = vec![T::zero(); o * ohw];
        matmul(o, c * k * k, ohw, self.value(w).data(), false, &cols, false, &mut y, false);
        if let Some(b) = b {
            for (row, &bb) in y.chunks_exact_mut(ohw).zip(self.value(b).data()) {
                row.iter_mut().for_each(|v| *v += bb);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let req = self.needs(&parents);
        Ok(self.push(
            Tensor::new(&[o, geom.oh, geom.ow], y)?,
            Op::Conv2d { x, w, b, stride },
            req,
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, ShapeError> {
        let (c, h, w) = chw(self.shape(x))?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let req = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[c, h2, w2], out)?, Op::Upsample2x(x), req))
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(mismatch(s, &first));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let req = self.needs(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), req))
    }

    /// Top-left crop of `[C,H,W]` to `[C,h,w]`.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var, ShapeError> {
        let (c, sh, sw) = chw(self.shape(x))?;
        if h > sh || w > sw {
            return Err(invalid(format!("crop {h}x{w} exceeds {sh}x{sw}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let start = (ch * sh + y) * sw;
                out.extend_from_slice(&src[start..start + w]);
            }
        }
        let req = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[c, h, w], out)?, Op::Crop(x), req))
    }

    /// Global spatial mean `[C,H,W] -> [C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var, ShapeError> {
        let (c, h, w) = chw(self.shape(x))?;
        let hw = h * w;
        let inv = T::lit(1.0 / hw as f64);
        let src = self.value(x).data();
        let out = (0..c)
            .map(|ch| src[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let req = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[c], out)?, Op::MeanPool(x), req))
    }

    /// Softmax across the leading axis of `[N,H,W]`, independently per pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var, ShapeError> {
        let (n, h, w) = chw(self.shape(x))?;
        let out = kernels::softmax_channels(self.value(x).data(), n, h * w);
        let req = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[n, h, w], out)?, Op::SoftmaxChannels(x), req))
    }

    /// Sum of selected rows of a `[R, D]` table.
    pub fn gather_sum_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, ShapeError> {
        let ts = self.shape(table).to_vec();
        let (r, d) = match ts.as_slice() {
            [r, d] => (*r, *d),
            _ => return Err(invalid("embedding table must be 2-D")),
        };
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(invalid(format!("row {bad} out of range for {r} rows")));
        }
        let t = self.value(table).data();
        let mut out = vec![T::zero(); d];
        for &i in rows {
            for (o, &v) in out.iter_mut().zip(&t[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        let req = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(&[d], out)?,
            Op::GatherSumRows {
                table,
                rows: rows.to_vec(),
            },
            req,
        ))
    }

    /// Maps a planar `[3,H,W]` image through `N` curve sets `[3,N,L]`,
    /// producing candidates `[N,3,H,W]`.
    pub fn apply_curves(&mut self, curves: Var, image: Var) -> Result<Var, ShapeError> {
        let cs = self.shape(curves).to_vec();
        let is = self.shape(image).to_vec();
        let (n, l) = match cs.as_slice() {
            [3, n, l] if *l >= 2 => (*n, *l),
            _ => return Err(invalid(format!("curves must be [3,N,L>=2], got {cs:?}"))),
        };
        let (c, h, w) = chw(&is)?;
        if c != 3 {
            return Err(invalid(format!("image must be [3,H,W], got {is:?}")));
        }
        let out = kernels::apply_curves(self.value(curves).data(), n, l, self.value(image).data(), h * w);
        let req = self.needs(&[curves, image]);
        Ok(self.push(Tensor::new(&[n, 3, h, w], out)?, Op::ApplyCurves { curves, image }, req))
    }

    /// `sum_j weights[j] * candidates[j]`, weights `[N,H,W]`, candidates `[N,3,H,W]`.
    pub fn weighted_fuse(&mut self, weights: Var, candidates: Var) -> Result<Var, ShapeError> {
        let ws = self.shape(weights).to_vec();
        let cs = self.shape(candidates).to_vec();
        let (n, h, w) = chw(&ws)?;
        if cs != [n, 3, h, w] {
            return Err(mismatch(&ws, &cs));
        }
        let out = kernels::fuse(self.value(weights).data(), self.value(candidates).data(), n, h * w);
        let req = self.needs(&[weights, candidates]);
        Ok(self.push(
            Tensor::new(&[3, h, w], out)?,
            Op::WeightedFuse {
                weights,
                candidates,
            },
            req,
        ))
    }

    /// Separable normalized blur of each `[H,W]` plane of `[C,H,W]`; the
    /// window is truncated at the borders and renormalized.
    pub fn blur(&mut self, x: Var, kernel: Rc<Vec<T>>) -> Result<Var, ShapeError> {
        let (c, h, w) = chw(self.shape(x))?;
        let out = kernels::blur_planes(self.value(x).data(), c, h, w, &kernel, false);
        let req = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[c, h, w], out)?, Op::Blur { x, kernel }, req))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, ShapeError> {
        if loss.0 >= self.nodes.len() {
            return Err(invalid("backward called on a node that was never recorded"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(vb) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(vb) {
                        *d += g / y;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for (((d, &g), &x), &y) in d.iter_mut().zip(gd).zip(va).zip(vb) {
                        *d -= g * x / (y * y);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mean(a) => {
                let g0 = gd[0] / T::lit(self.value(*a).numel() as f64);
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(va) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &g), &s) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * s * (T::one() - s);
                    }
                }
            }
            Op::Dense {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                let (rows, inp, out) = (*rows, *inp, *out);
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                if let Some(d) = self.acc(grads, *x) {
                    matmul(rows, out, inp, gd, false, vw, false, d, true);
                }
                if let Some(d) = self.acc(grads, *w) {
                    matmul(out, rows, inp, gd, true, vx, false, d, true);
                }
                if let Some(b) = b {
                    if let Some(d) = self.acc(grads, *b) {
                        for row in gd.chunks_exact(out) {
                            d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                        }
                    }
                }
            }
            Op::LinearConst {
                x,
                matrix,
                rows,
                inp,
                out,
            } => {
                if let Some(d) = self.acc(grads, *x) {
                    matmul(*rows, *out, *inp, gd, false, matrix, false, d, true);
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (c, h, wd) = chw(self.shape(*x)).expect("checked in forward");
                let ws = self.shape(*w);
                let (o, k) = (ws[0], ws[2]);
                let geom = ConvGeom::new(h, wd, k, *stride);
                let ohw = geom.oh * geom.ow;
                let ckk = c * k * k;
                let vw = self.value(*w).data();
                if self.nodes[w.0].requires_grad {
                    let cols = geom.im2col(self.value(*x).data(), c);
                    let d = self.acc(grads, *w).unwrap();
                    matmul(o, ohw, ckk, gd, false, &cols, true, d, true);
                }
                if let Some(b) = b {
                    if let Some(d) = self.acc(grads, *b) {
                        for (d, row) in d.iter_mut().zip(gd.chunks_exact(ohw)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    let mut dcols = vec![T::zero(); ckk * ohw];
                    matmul(ckk, o, ohw, vw, true, gd, false, &mut dcols, false);
                    geom.col2im(&dcols, c, d);
                }
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = chw(self.shape(*x)).unwrap();
                let (h2, w2) = (2 * h, 2 * w);
                if let Some(d) = self.acc(grads, *x) {
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                d[(ch * h + y / 2) * w + xx / 2] += gd[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(d) = self.acc(grads, p) {
                        d.iter_mut()
                            .zip(&gd[offset..offset + n])
                            .for_each(|(d, &g)| *d += g);
                    }
                    offset += n;
                }
            }
            Op::Crop(x) => {
                let (c, sh, sw) = chw(self.shape(*x)).unwrap();
                let (_, h, w) = chw(node.value.shape()).unwrap();
                if let Some(d) = self.acc(grads, *x) {
                    for ch in 0..c {
                        for y in 0..h {
                            let dst = (ch * sh + y) * sw;
                            let src = (ch * h + y) * w;
                            d[dst..dst + w]
                                .iter_mut()
                                .zip(&gd[src..src + w])
                                .for_each(|(d, &g)| *d += g);
                        }
                    }
                }
            }
            Op::MeanPool(x) => {
                let (_, h, w) = chw(self.shape(*x)).unwrap();
                let hw = h * w;
                let inv = T::lit(1.0 / hw as f64);
                if let Some(d) = self.acc(grads, *x) {
                    for (plane, &g) in d.chunks_exact_mut(hw).zip(gd) {
                        plane.iter_mut().for_each(|d| *d += g * inv);
                    }
                }
            }
            Op::SoftmaxChannels(x) => {
                let (n, h, w) = chw(node.value.shape()).unwrap();
                let hw = h * w;
                let y = node.value.data();
                if let Some(d) = self.acc(grads, *x) {
                    for p in 0..hw {
                        let dot: T = (0..n).map(|j| y[j * hw + p] * gd[j * hw + p]).sum();
                        for j in 0..n {
                            d[j * hw + p] += y[j * hw + p] * (gd[j * hw + p] - dot);
                        }
                    }
                }
            }
            Op::GatherSumRows { table, rows } => {
                let dim = self.shape(*table)[1];
                if let Some(d) = self.acc(grads, *table) {
                    for &r in rows {
                        d[r * dim..(r + 1) * dim]
                            .iter_mut()
                            .zip(gd)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::ApplyCurves { curves, image } => {
                let cs = self.shape(*curves);
                let (n, l) = (cs[1], cs[2]);
                let hw = self.value(*image).numel() / 3;
                let img = self.value(*image).data();
                if let Some(d) = self.acc(grads, *curves) {
                    kernels::apply_curves_grad_curves(gd, n, l, img, hw, d);
                }
                let cv = self.value(*curves).data();
                if let Some(d) = self.acc(grads, *image) {
                    kernels::apply_curves_grad_image(gd, cv, n, l, img, hw, d);
                }
            }
            Op::WeightedFuse {
                weights,
                candidates,
            } => {
                let (n, h, w) = chw(self.shape(*weights)).unwrap();
                let hw = h * w;
                let (vw, vc) = (self.value(*weights).data(), self.value(*candidates).data());
                if let Some(d) = self.acc(grads, *weights) {
                    for j in 0..n {
                        for c in 0..3 {
                            let cand = &vc[(j * 3 + c) * hw..(j * 3 + c + 1) * hw];
                            let gc = &gd[c * hw..(c + 1) * hw];
                            for p in 0..hw {
                                d[j * hw + p] += gc[p] * cand[p];
                            }
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *candidates) {
                    for j in 0..n {
                        for c in 0..3 {
                            let dst = &mut d[(j * 3 + c) * hw..(j * 3 + c + 1) * hw];
                            let gc = &gd[c * hw..(c + 1) * hw];
                            for p in 0..hw {
                                dst[p] += vw[j * hw + p] * gc[p];
                            }
                        }
                    }
                }
            }
            Op::Blur { x, kernel } => {
                let (c, h, w) = chw(self.shape(*x)).unwrap();
                if let Some(d) = self.acc(grads, *x) {
                    let back = kernels::blur_planes(gd, c, h, w, kernel, true);
                    d.iter_mut().zip(&back).for_each(|(d, &g)| *d += g);
                }
            }
        }
    }
}

fn chw(shape: &[usize]) -> Result<(usize, usize, usize), ShapeError> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(invalid(format!("expected [C,H,W], got {shape:?}"))),
    }
}

/// Output geometry and gather indices of a reflection-padded convolution.
struct ConvGeom {
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    /// `index[(ky*k + kx) * oh*ow + o]` = flat input offset within a plane.
    index: Vec<u32>,
}

impl ConvGeom {
    fn new(h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = (k / 2) as isize;
        let oh = (h + 2 * (k / 2) - k) / stride + 1;
        let ow = (w + 2 * (k / 2) - k) / stride + 1;
        let mut index = Vec::with_capacity(k * k * oh * ow);
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..oh {
                    let iy = reflect_index((oy * stride + ky) as isize - pad, h);
                    for ox in 0..ow {
                        let ix = reflect_index((ox * stride + kx) as isize - pad, w);
                        index.push((iy * w + ix) as u32);
                    }
                }
            }
        }
        Self {
            h,
            w,
            k,
            oh,
            ow,
            index,
        }
    }

    fn im2col<T: Real>(&self, x: &[T], c: usize) -> Vec<T> {
        let hw = self.h * self.w;
        let block = self.k * self.k * self.oh * self.ow;
        let mut cols = Vec::with_capacity(c * block);
        for ch in 0..c {
            let plane = &x[ch * hw..(ch + 1) * hw];
            cols.extend(self.index.iter().map(|&i| plane[i as usize]));
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], c: usize, dx: &mut [T]) {
        let hw = self.h * self.w;
        let block = self.index.len();
        for ch in 0..c {
            let plane = &mut dx[ch * hw..(ch + 1) * hw];
            for (&i, &v) in self.index.iter().zip(&cols[ch * block..(ch + 1) * block]) {
                plane[i as usize] += v;
            }
        }
    }
}

/// Gradients of every recorded node reached by the reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
