//! Variational Retinex decomposition `I = L * R`.
//!
//! Minimizes
//! `||I - L*R||^2 + lambda1 ||grad L||^2 + lambda2 ||grad R||^2`
//! (forward differences, no boundary terms) by alternating projected descent
//! on `L` and `R`. Each half-step uses a diagonal majorizer of the Hessian as
//! its preconditioner and backtracks until the energy does not increase.

use crate::error::{Error, Result};
use crate::imagecore::{IlluminationMap, Image, ReflectanceMap};

const MAX_HALVINGS: usize = 20;
/// Largest eigenvalue of the forward-difference Laplacian on a 2-D grid.
const LAPLACIAN_BOUND: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub epsilon: f64,
}

impl Default for DecompParams {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.01,
            max_iters: 200,
            tol: 1e-6,
            epsilon: 1e-4,
        }
    }
}

impl DecompParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("tol", self.tol),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} (must be > 0)")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompResult {
    pub l: IlluminationMap,
    pub r: ReflectanceMap,
    /// Energy after each iteration.
    pub objective_trace: Vec<f64>,
    pub iters_used: usize,
}

impl DecompResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least one iteration")
    }
}

/// Planar working copy: `l` is `H*W`, `r` holds three `H*W` planes, `i` likewise.
struct Problem {
    h: usize,
    w: usize,
    i: Vec<f64>,
    lambda1: f64,
    lambda2: f64,
}

impl Problem {
    fn energy(&self, l: &[f64], r: &[f64]) -> f64 {
        let n = self.h * self.w;
        let mut fid = 0.0;
        for c in 0..3 {
            for p in 0..n {
                let e = self.i[c * n + p] - l[p] * r[c * n + p];
                fid += e * e;
            }
        }
        let mut smooth_r = 0.0;
        for c in 0..3 {
            smooth_r += grad_sq(&r[c * n..(c + 1) * n], self.h, self.w);
        }
        fid + self.lambda1 * grad_sq(l, self.h, self.w) + self.lambda2 * smooth_r
    }
}

/// Sum of squared forward differences of an `h x w` plane.
pub fn grad_sq(v: &[f64], h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            let here = v[y * w + x];
            if x + 1 < w {
                let d = v[y * w + x + 1] - here;
                s += d * d;
            }
            if y + 1 < h {
                let d = v[(y + 1) * w + x] - here;
                s += d * d;
            }
        }
    }
    s
}

/// Adds `scale * D^T D v` into `out`, the gradient of `scale/2 * grad_sq(v)`.
fn add_laplacian(v: &[f64], h: usize, w: usize, scale: f64, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                let d = v[p + 1] - v[p];
                out[p] -= scale * d;
                out[p + 1] += scale * d;
            }
            if y + 1 < h {
                let d = v[p + w] - v[p];
                out[p] -= scale * d;
                out[p + w] += scale * d;
            }
        }
    }
}

fn to_planes(img: &Image) -> Vec<f64> {
    let (n, ch) = (img.height() * img.width(), img.channels());
    let mut out = vec![0.0; n * ch];
    for (p, px) in img.data().chunks_exact(ch).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out[c * n + p] = v;
        }
    }
    out
}

fn from_planes(planes: &[f64], h: usize, w: usize, ch: usize) -> Result<Image> {
    let n = h * w;
    let mut data = vec![0.0; n * ch];
    for p in 0..n {
        for c in 0..ch {
            data[p * ch + c] = planes[c * n + p];
        }
    }
    Image::new(h, w, ch, data)
}

/// Expands a single-channel image to three identical channels.
fn as_rgb(img: &Image) -> Result<Image> {
    match img.channels() {
        3 => Ok(img.clone()),
        _ => Image::new(
            img.height(),
            img.width(),
            3,
            img.data().iter().flat_map(|&v| [v, v, v]).collect(),
        ),
    }
}

pub fn objective(i: &Image, l: &IlluminationMap, r: &ReflectanceMap, p: &DecompParams) -> Result<f64> {
    let rgb = as_rgb(i)?;
    rgb.expect_congruent(r.image())?;
    if l.height() != i.height() || l.width() != i.width() {
        return Err(Error::shape(i.dims_string(), l.image().dims_string()));
    }
    let prob = Problem {
        h: i.height(),
        w: i.width(),
        i: to_planes(&rgb),
        lambda1: p.lambda1,
        lambda2: p.lambda2,
    };
    Ok(prob.energy(l.data(), &to_planes(r.image())))
}

/// Tries `x - s * precond * grad` projected onto `[lo, 1]` for `s = 1, 1/2, ...`
/// and keeps the first candidate whose energy does not exceed `current`.
fn backtrack<F>(x: &mut [f64], grad: &[f64], precond: &[f64], lo: f64, current: f64, energy: F) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut s = 1.0;
    let mut cand = vec![0.0; x.len()];
    for _ in 0..=MAX_HALVINGS {
        for k in 0..x.len() {
            cand[k] = (x[k] - s * grad[k] / precond[k]).clamp(lo, 1.0);
        }
        let e = energy(&cand);
        if e <= current {
            x.copy_from_slice(&cand);
            return e;
        }
        s *= 0.5;
    }
    current
}

pub fn decompose(img: &Image, p: &DecompParams) -> Result<DecompResult> {
    p.validate()?;
    let rgb = as_rgb(img)?;
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let eps = p.epsilon;
    let prob = Problem {
        h,
        w,
        i: to_planes(&rgb),
        lambda1: p.lambda1,
        lambda2: p.lambda2,
    };

    let mut l: Vec<f64> = rgb
        .data()
        .chunks_exact(3)
        .map(|px| px.iter().cloned().fold(0.0, f64::max).clamp(eps, 1.0))
        .collect();
    let mut r = vec![0.0; 3 * n];
    for c in 0..3 {
        for q in 0..n {
            r[c * n + q] = (prob.i[c * n + q] / (l[q] + eps)).clamp(eps, 1.0);
        }
    }

    let mut energy = prob.energy(&l, &r);
    if !energy.is_finite() {
        return Err(Error::NonFinite("retinex objective"));
    }
    let mut trace = Vec::with_capacity(p.max_iters);
    let mut grad_l = vec![0.0; n];
    let mut pre_l = vec![0.0; n];
    let mut grad_r = vec![0.0; 3 * n];
    let mut pre_r = vec![0.0; 3 * n];

    for _ in 0..p.max_iters {
        let before = energy;
        // Illumination half-step.
        grad_l.iter_mut().for_each(|g| *g = 0.0);
        for q in 0..n {
            let mut r2 = 0.0;
            for c in 0..3 {
                let rc = r[c * n + q];
                grad_l[q] -= 2.0 * (prob.i[c * n + q] - l[q] * rc) * rc;
                r2 += rc * rc;
            }
            pre_l[q] = 2.0 * r2 + 2.0 * LAPLACIAN_BOUND * p.lambda1;
        }
        add_laplacian(&l, h, w, 2.0 * p.lambda1, &mut grad_l);
        energy = backtrack(&mut l, &grad_l, &pre_l, eps, energy, |cand| prob.energy(cand, &r));

        // Reflectance half-step.
        grad_r.iter_mut().for_each(|g| *g = 0.0);
        for c in 0..3 {
            for (q, &lq) in l.iter().enumerate() {
                let k = c * n + q;
                grad_r[k] = -2.0 * (prob.i[k] - lq * r[k]) * lq;
                pre_r[k] = 2.0 * lq * lq + 2.0 * LAPLACIAN_BOUND * p.lambda2;
            }
            let range = c * n..(c + 1) * n;
            add_laplacian(&r[range.clone()], h, w, 2.0 * p.lambda2, &mut grad_r[range]);
        }
        energy = backtrack(&mut r, &grad_r, &pre_r, eps, energy, |cand| prob.energy(&l, cand));

        if !energy.is_finite() {
            return Err(Error::NonFinite("retinex objective"));
        }
        trace.push(energy);
        let rel = (before - energy).abs() / before.abs().max(f64::MIN_POSITIVE);
        if rel < p.tol {
            break;
        }
    }

    Ok(DecompResult {
        l: IlluminationMap::new(Image::new(h, w, 1, l)?)?,
        r: ReflectanceMap::new(from_planes(&r, h, w, 3)?)?,
        iters_used: trace.len(),
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> DecompParams {
        DecompParams::default()
    }

    #[test]
    fn objective_zero_for_exact_constant_factors() {
        let l = IlluminationMap::filled(4, 5, 0.5).unwrap();
        let r = ReflectanceMap::new(Image::filled(4, 5, 3, 0.8).unwrap()).unwrap();
        let i = Image::filled(4, 5, 3, 0.4).unwrap();
        assert!(objective(&i, &l, &r, &params()).unwrap().abs() < 1e-24);
    }

    #[test]
    fn laplacian_matches_grad_sq_derivative() {
        let (h, w) = (3, 4);
        let v: Vec<f64> = (0..h * w).map(|k| ((k * 7) % 5) as f64 * 0.1).collect();
        let mut g = vec![0.0; h * w];
        add_laplacian(&v, h, w, 2.0, &mut g);
        for k in 0..h * w {
            let mut plus = v.clone();
            plus[k] += 1e-6;
            let mut minus = v.clone();
            minus[k] -= 1e-6;
            let fd = (grad_sq(&plus, h, w) - grad_sq(&minus, h, w)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn constant_image_fixed_point() {
        let i = Image::filled(8, 8, 3, 0.5).unwrap();
        let res = decompose(&i, &params()).unwrap();
        for &v in res.l.data() {
            assert!((v - 0.5).abs() < 1e-3, "{v}");
        }
        for &v in res.r.data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn rejects_bad_params() {
        let i = Image::filled(8, 8, 3, 0.5).unwrap();
        let bad = DecompParams {
            lambda1: 0.0,
            ..params()
        };
        assert!(decompose(&i, &bad).is_err());
    }
}
