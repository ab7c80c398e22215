//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints for nodes that depend
//! on a [`Graph::param`] leaf.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { input: Var, weight: Var, bias: Var },
    Dense { input: Var, weight: Var, bias: Var },
    AddChannelBias { input: Var, bias: Var },
    BlurValid { input: Var, kernel: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not influence the loss.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, k), needs)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        let needs = self.needs(a);
        self.push(value, Op::AddScalar(a), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let needs = self.needs(a);
        self.push(value, Op::Square(a), needs)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * sigmoid(v));
        let needs = self.needs(a);
        self.push(value, Op::Silu(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(value, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let needs = self.needs(a);
        self.push(value, Op::Mean(a), needs)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.square(diff);
        Ok(self.mean(sq))
    }

    /// Zero-padded "same" convolution.
    ///
    /// `input` is `[N, Ci, H, W]`, `weight` is `[Co, Ci, K, K]` with odd `K`,
    /// `bias` is `[Co]`; the result is `[N, Co, H, W]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let [n, ci, h, wd] = *x.shape() else {
            return Err(Error::shape("[N, C, H, W] input", format!("{:?}", x.shape())));
        };
        let [co, wci, k, k2] = *w.shape() else {
            return Err(Error::shape("[Co, Ci, K, K] weight", format!("{:?}", w.shape())));
        };
        if wci != ci || k != k2 || k % 2 == 0 {
            return Err(Error::shape(
                format!("[_, {ci}, odd K, K] weight"),
                format!("{:?}", w.shape()),
            ));
        }
        b.expect_shape(&[co])?;

        let plane = h * wd;
        let rows = ci * k * k;
        let mut out = vec![0.0; n * co * plane];
        let mut col = vec![0.0; rows * plane];
        for item in 0..n {
            let src = &x.data()[item * ci * plane..(item + 1) * ci * plane];
            im2col(src, ci, h, wd, k, &mut col);
            let dst = &mut out[item * co * plane..(item + 1) * co * plane];
            for (o, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                chunk.fill(b.data()[o]);
            }
            gemm(co, rows, plane, w.data(), false, &col, false, dst, 1.0);
        }
        let value = Tensor::new(vec![n, co, h, wd], out)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Fully connected layer: `[N, I] x [O, I]^T + [O] -> [N, O]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let [n, i_dim] = *x.shape() else {
            return Err(Error::shape("[N, I] input", format!("{:?}", x.shape())));
        };
        let [o_dim, wi] = *w.shape() else {
            return Err(Error::shape("[O, I] weight", format!("{:?}", w.shape())));
        };
        if wi != i_dim {
            return Err(Error::shape(format!("[_, {i_dim}] weight"), format!("{:?}", w.shape())));
        }
        b.expect_shape(&[o_dim])?;
        let mut out = Vec::with_capacity(n * o_dim);
        for row in x.data().chunks_exact(i_dim) {
            for (o, wrow) in w.data().chunks_exact(i_dim).enumerate() {
                let dot: f64 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
                out.push(dot + b.data()[o]);
            }
        }
        let value = Tensor::new(vec![n, o_dim], out)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    /// Adds a per-item, per-channel bias `[N, C]` to every pixel of `[N, C, H, W]`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        let [n, c, h, w] = *x.shape() else {
            return Err(Error::shape("[N, C, H, W] input", format!("{:?}", x.shape())));
        };
        b.expect_shape(&[n, c])?;
        let plane = h * w;
        let mut out = x.data().to_vec();
        for (chunk, &bv) in out.chunks_exact_mut(plane).zip(b.data()) {
            for v in chunk {
                *v += bv;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(value, Op::AddChannelBias { input, bias }, needs))
    }

    /// Separable "valid" filtering of the two trailing axes with a 1-D `kernel`
    /// applied along rows and columns.
    pub fn blur_valid(&mut self, input: Var, kernel: &[f64]) -> Result<Var> {
        let x = self.value(input);
        let rank = x.rank();
        if rank < 2 {
            return Err(Error::shape("rank >= 2", rank));
        }
        let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
        let k = kernel.len();
        if k == 0 || h < k || w < k {
            return Err(Error::invalid(
                "blur window",
                format!("{k} taps on a {h}x{w} plane"),
            ));
        }
        let mut shape = x.shape().to_vec();
        shape[rank - 2] = h - k + 1;
        shape[rank - 1] = w - k + 1;
        let data = blur_forward(x.data(), h, w, kernel);
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::BlurValid {
                input,
                kernel: kernel.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Unsupported(format!(
                "backward from non-scalar node with shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                    self.accumulate(&mut grads, *b, || g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, || mul3(&g, bv, 1.0));
                    self.accumulate(&mut grads, *b, || mul3(&g, av, 1.0));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, || {
                        g.zip_map(bv, |gv, bv| gv / bv).expect("shapes checked in forward")
                    });
                    self.accumulate(&mut grads, *b, || {
                        let data = g
                            .data()
                            .iter()
                            .zip(av.data())
                            .zip(bv.data())
                            .map(|((gv, av), bv)| -gv * av / (bv * bv))
                            .collect();
                        Tensor::new(g.shape().to_vec(), data).expect("shape of g")
                    });
                }
                Op::Scale(a, k) => {
                    self.accumulate(&mut grads, *a, || g.scale(*k));
                }
                Op::AddScalar(a) => {
                    self.accumulate(&mut grads, *a, || g.clone());
                }
                Op::Square(a) => {
                    let av = self.value(*a);
                    self.accumulate(&mut grads, *a, || mul3(&g, av, 2.0));
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    self.accumulate(&mut grads, *a, || {
                        g.zip_map(av, |gv, x| {
                            let s = sigmoid(x);
                            gv * s * (1.0 + x * (1.0 - s))
                        })
                        .expect("shapes checked in forward")
                    });
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape();
                    self.accumulate(&mut grads, *a, || Tensor::full(shape, g.item()));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let scale = g.item() / av.len() as f64;
                    self.accumulate(&mut grads, *a, || Tensor::full(av.shape(), scale));
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let (gi, gw, gb) = self.conv2d_backward(&g, *input, *weight, *bias);
                    if let Some(gi) = gi {
                        self.accumulate(&mut grads, *input, || gi);
                    }
                    if let Some(gw) = gw {
                        self.accumulate(&mut grads, *weight, || gw);
                    }
                    if let Some(gb) = gb {
                        self.accumulate(&mut grads, *bias, || gb);
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let (x, w) = (self.value(*input), self.value(*weight));
                    let [_, i_dim] = *x.shape() else { unreachable!() };
                    let o_dim = w.shape()[0];
                    self.accumulate(&mut grads, *input, || {
                        let mut gi = Tensor::zeros(x.shape());
                        for (grow, gi_row) in
                            g.data().chunks_exact(o_dim).zip(gi.data_mut().chunks_exact_mut(i_dim))
                        {
                            for (o, wrow) in w.data().chunks_exact(i_dim).enumerate() {
                                for (dst, wv) in gi_row.iter_mut().zip(wrow) {
                                    *dst += grow[o] * wv;
                                }
                            }
                        }
                        gi
                    });
                    self.accumulate(&mut grads, *weight, || {
                        let mut gw = Tensor::zeros(w.shape());
                        for (grow, xrow) in g.data().chunks_exact(o_dim).zip(x.data().chunks_exact(i_dim)) {
                            for (o, gw_row) in gw.data_mut().chunks_exact_mut(i_dim).enumerate() {
                                for (dst, xv) in gw_row.iter_mut().zip(xrow) {
                                    *dst += grow[o] * xv;
                                }
                            }
                        }
                        gw
                    });
                    self.accumulate(&mut grads, *bias, || {
                        let mut gb = Tensor::zeros(&[o_dim]);
                        for grow in g.data().chunks_exact(o_dim) {
                            for (dst, gv) in gb.data_mut().iter_mut().zip(grow) {
                                *dst += gv;
                            }
                        }
                        gb
                    });
                }
                Op::AddChannelBias { input, bias } => {
                    let shape = self.value(*input).shape();
                    let plane = shape[2] * shape[3];
                    self.accumulate(&mut grads, *input, || g.clone());
                    self.accumulate(&mut grads, *bias, || {
                        let data = g.data().chunks_exact(plane).map(|c| c.iter().sum()).collect();
                        Tensor::new(vec![shape[0], shape[1]], data).expect("bias shape")
                    });
                }
                Op::BlurValid { input, kernel } => {
                    let shape = self.value(*input).shape();
                    let rank = shape.len();
                    let (h, w) = (shape[rank - 2], shape[rank - 1]);
                    self.accumulate(&mut grads, *input, || {
                        let data = blur_backward(g.data(), h, w, kernel);
                        Tensor::new(shape.to_vec(), data).expect("input shape")
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.needs(v) {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g).expect("gradient shapes match values"),
            slot => *slot = Some(g),
        }
    }

    fn conv2d_backward(
        &self,
        g: &Tensor,
        input: Var,
        weight: Var,
        bias: Var,
    ) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
        let x = self.value(input);
        let w = self.value(weight);
        let [n, ci, h, wd] = *x.shape() else { unreachable!() };
        let [co, _, k, _] = *w.shape() else { unreachable!() };
        let plane = h * wd;
        let rows = ci * k * k;

        let want_input = self.needs(input);
        let want_weight = self.needs(weight);
        let mut gi = want_input.then(|| vec![0.0; n * ci * plane]);
        let mut gw = want_weight.then(|| vec![0.0; co * rows]);
        let mut col = vec![0.0; rows * plane];
        let mut dcol = vec![0.0; rows * plane];

        for item in 0..n {
            let gout = &g.data()[item * co * plane..(item + 1) * co * plane];
            if let Some(gw) = gw.as_mut() {
                let src = &x.data()[item * ci * plane..(item + 1) * ci * plane];
                im2col(src, ci, h, wd, k, &mut col);
                // dW += dOut * col^T
                gemm(co, plane, rows, gout, false, &col, true, gw, 1.0);
            }
            if let Some(gi) = gi.as_mut() {
                // dcol = W^T * dOut
                gemm(rows, co, plane, w.data(), true, gout, false, &mut dcol, 0.0);
                col2im(&dcol, ci, h, wd, k, &mut gi[item * ci * plane..(item + 1) * ci * plane]);
            }
        }
        let gb = self.needs(bias).then(|| {
            let mut gb = vec![0.0; co];
            for (idx, chunk) in g.data().chunks_exact(plane).enumerate() {
                gb[idx % co] += chunk.iter().sum::<f64>();
            }
            Tensor::new(vec![co], gb).expect("bias shape")
        });
        (
            gi.map(|d| Tensor::new(x.shape().to_vec(), d).expect("input shape")),
            gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("weight shape")),
            gb,
        )
    }
}

fn mul3(g: &Tensor, other: &Tensor, k: f64) -> Tensor {
    g.zip_map(other, |gv, ov| k * gv * ov)
        .expect("shapes checked in forward")
}

/// Unfolds `[C, H, W]` into a `[C*K*K, H*W]` patch matrix with zero padding.
fn im2col(src: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ch in 0..c {
        let chan = &src[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &chan[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in drow.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `[C, H, W]`.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, dst: &mut [f64]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ch in 0..c {
        let chan = &mut dst[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let crow = &src[y * w..(y + 1) * w];
                    let trow = &mut chan[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &v) in crow.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            trow[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = a * b + beta * c` for row-major operands; `a` is `m x k`, `b` is `k x n`.
/// A transposed flag means the slice holds the transpose in row-major order.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the kernel touches for
    // the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn blur_forward(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let planes = src.len() / (h * w);
    let mut out = vec![0.0; planes * ho * wo];
    let mut tmp = vec![0.0; h * wo];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..wo {
                tmp[y * wo + x] = kernel.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for (i, &kv) in kernel.iter().enumerate() {
                let trow = &tmp[(y + i) * wo..(y + i + 1) * wo];
                for (d, t) in dst[y * wo..(y + 1) * wo].iter_mut().zip(trow) {
                    *d += kv * t;
                }
            }
        }
    }
    out
}

fn blur_backward(g: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let planes = g.len() / (ho * wo);
    let mut out = vec![0.0; planes * h * w];
    let mut dtmp = vec![0.0; h * wo];
    for p in 0..planes {
        dtmp.fill(0.0);
        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for (i, &kv) in kernel.iter().enumerate() {
                let drow = &mut dtmp[(y + i) * wo..(y + i + 1) * wo];
                for (d, gv) in drow.iter_mut().zip(&gp[y * wo..(y + 1) * wo]) {
                    *d += kv * gv;
                }
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let drow = &dtmp[y * wo..(y + 1) * wo];
            let orow = &mut dst[y * w..(y + 1) * w];
            for (x, &dv) in drow.iter().enumerate() {
                for (j, &kv) in kernel.iter().enumerate() {
                    orow[x + j] += kv * dv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn half_sum_of_squares_has_identity_gradient() {
        let mut g = Graph::new();
        let theta = g.param(t(&[4], &[0.3, -1.2, 2.0, 0.0]));
        let sq = g.square(theta);
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[0.3, -1.2, 2.0, 0.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let theta = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let _unused = g.add(theta, c).unwrap();
        let loss = g.sum(c);
        let mut grads = g.backward(loss).unwrap();
        let like = g.value(theta).clone();
        assert_eq!(grads.take_or_zeros(theta, &like).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let theta = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(theta), Err(Error::Unsupported(_))));
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
    }

    #[test]
    fn conv_shifted_kernel_pads_with_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 3], &[1., 2., 3.]));
        // reads the right-hand neighbour
        let mut k = vec![0.0; 9];
        k[5] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2., 3., 0.]);
    }

    #[test]
    fn blur_valid_box_filter() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let y = g.blur_valid(x, &[0.5, 0.5]).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2]);
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 6.0, 7.0]);
        assert!(g.blur_valid(x, &[0.25; 4]).is_err());
    }
}
