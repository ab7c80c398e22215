//! Training machinery shared by the illumination flow and the reflectance
//! denoiser: configuration, step-size ladder, per-item loss graphs, parallel
//! gradient accumulation, and the optimization loop.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{
    adam_step, check_gradients, AdamState, GradCheckReport, Graph, Network, NetworkSpec, Tensor, Var,
    VelocityField,
};
use crate::error::{Error, Result};
use crate::metrics::{ssim_differentiable, SsimParams};

/// Configuration for both flow trainers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfiTrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Number of rungs `K` of the step-size ladder `{1/2, ..., 2^-K}`.
    pub d_levels: usize,
    pub seed: u64,
    pub patch_size: usize,
    pub network: NetworkSpec,
}

impl Default for CrfiTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            iterations: 2000,
            lr: crate::autodiff::DEFAULT_LR,
            d_levels: 6,
            seed: 0,
            patch_size: 64,
            network: NetworkSpec::default(),
        }
    }
}

impl CrfiTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::invalid("batch_size", format!("{} (must be even and >= 2)", self.batch_size)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} (must be > 0)", self.lr)));
        }
        if self.d_levels == 0 || self.d_levels > 30 {
            return Err(Error::invalid("d_levels", format!("{} (must be in 1..=30)", self.d_levels)));
        }
        if self.patch_size == 0 {
            return Err(Error::invalid("patch_size", "must be >= 1"));
        }
        self.network.validate()
    }
}

/// `[2^-1, 2^-2, ..., 2^-k]`.
pub fn dyadic_ladder(k: usize) -> Vec<f64> {
    (1..=k).map(|i| 0.5f64.powi(i as i32)).collect()
}

/// Draws `d` uniformly from the ladder, then `t ~ U[0, 1 - 2d]`.
pub(crate) fn sample_shortcut_time(rng: &mut ChaCha8Rng, d_levels: usize) -> (f64, f64) {
    let d = 0.5f64.powi(rng.random_range(1..=d_levels) as i32);
    let t = rng.random_range(0.0..=1.0 - 2.0 * d);
    (t, d)
}

/// Average of the velocities at the start and the end of one Euler step of
/// size `d`, the regression target for a single step of size `2d`.
pub fn shortcut_target<F: VelocityField + ?Sized>(field: &F, z: &Tensor, t: f64, d: f64) -> Result<Tensor> {
    if d.is_nan() || d <= 0.0 {
        return Err(Error::invalid("d", format!("{d} (must be > 0)")));
    }
    if t + 2.0 * d > 1.0 + 1e-12 {
        return Err(Error::invalid("t + 2d", format!("{} exceeds 1", t + 2.0 * d)));
    }
    let v1 = field.velocity(z, t, d)?;
    let advanced = z.axpy(d, &v1)?;
    let v2 = field.velocity(&advanced, t + d, d)?;
    Ok(v1.add(&v2)?.scale(0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Half {
    Cfm,
    Consistency,
}

/// One batch element with its detached regression target.
#[derive(Debug, Clone)]
pub(crate) struct LossItem {
    pub half: Half,
    /// Network input `[C, H, W]`.
    pub z: Tensor,
    pub t: f64,
    /// Step-size conditioning of the prediction.
    pub d: f64,
    pub target: Tensor,
    /// Clean reference for the SSIM content term, which reconstructs
    /// `z + (1 - t) v` and compares it against this.
    pub clean: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowLoss {
    pub cfm: f64,
    pub consistency: f64,
    /// Mean `1 - SSIM` over the batch; zero for illumination training.
    pub content: f64,
}

impl FlowLoss {
    pub fn total(&self) -> f64 {
        self.cfm + self.consistency + self.content
    }
}

struct ItemValues {
    residual: f64,
    content: Option<f64>,
}

/// Splits the batch into its halves and checks their conditioning.
pub(crate) fn check_halves(items: &[(Half, f64)]) -> Result<usize> {
    let n = items.len();
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::MalformedBatch(format!("batch of {n} cannot be split in two halves")));
    }
    let half = n / 2;
    for (i, &(kind, d)) in items.iter().enumerate() {
        let want = if i < half { Half::Cfm } else { Half::Consistency };
        if kind != want {
            return Err(Error::MalformedBatch(format!("item {i} is in the wrong half")));
        }
        if want == Half::Cfm && d != 0.0 {
            return Err(Error::MalformedBatch(format!("item {i} of the first half has d = {d}")));
        }
        if want == Half::Consistency && (d.is_nan() || d <= 0.0) {
            return Err(Error::MalformedBatch(format!("item {i} of the second half has d = {d}")));
        }
    }
    Ok(half)
}

fn weights(items: &[LossItem]) -> Result<(f64, f64)> {
    let kinds: Vec<(Half, f64)> = items
        .iter()
        .map(|it| (it.half, it.d))
        .collect();
    let half = check_halves(&kinds)?;
    Ok((1.0 / half as f64, 1.0 / items.len() as f64))
}

/// Records one item's weighted loss on `g`.
fn item_graph(
    g: &mut Graph,
    net: &Network,
    params: &[Var],
    item: &LossItem,
    residual_weight: f64,
    content_weight: f64,
) -> Result<(Var, Var, Option<Var>)> {
    let mut shape = vec![1];
    shape.extend_from_slice(item.z.shape());
    let z = g.constant(item.z.clone().reshape(shape.clone())?);
    let v = net.forward_graph(g, params, z, &[item.t], &[item.d])?;
    let target = g.constant(item.target.clone().reshape(shape.clone())?);
    let residual = g.mse(v, target)?;
    let mut total = g.scale(residual, residual_weight);
    let mut ssim = None;
    if let Some(clean) = &item.clean {
        let step = g.scale(v, 1.0 - item.t);
        let rhat = g.add(z, step)?;
        let clean = g.constant(clean.clone().reshape(shape)?);
        let s = ssim_differentiable(g, rhat, clean, &SsimParams::default())?;
        let content = g.scale(s, -content_weight);
        let content = g.add_scalar(content, content_weight);
        total = g.add(total, content)?;
        ssim = Some(s);
    }
    Ok((total, residual, ssim))
}

fn summarize(items: &[LossItem], values: &[ItemValues]) -> FlowLoss {
    let half = items.len() / 2;
    let mut loss = FlowLoss::default();
    for (item, v) in items.iter().zip(values) {
        match item.half {
            Half::Cfm => loss.cfm += v.residual / half as f64,
            Half::Consistency => loss.consistency += v.residual / half as f64,
        }
        if let Some(s) = v.content {
            loss.content += (1.0 - s) / items.len() as f64;
        }
    }
    loss
}

/// Loss and summed parameter gradients of a batch. Items are evaluated in
/// parallel and their gradients summed in batch order.
pub(crate) fn loss_and_gradients(net: &Network, items: &[LossItem]) -> Result<(FlowLoss, Vec<Tensor>)> {
    let (rw, cw) = weights(items)?;
    let per_item: Vec<(ItemValues, Vec<Tensor>)> = items
        .par_iter()
        .map(|item| {
            let mut g = Graph::new();
            let params = net.bind(&mut g, true);
            let (total, residual, ssim) = item_graph(&mut g, net, &params, item, rw, cw)?;
            let values = ItemValues {
                residual: g.value(residual).item(),
                content: ssim.map(|s| g.value(s).item()),
            };
            let mut grads = g.backward(total)?;
            let grads = params
                .iter()
                .zip(net.parameters())
                .map(|(&p, (_, like))| grads.take_or_zeros(p, like))
                .collect();
            Ok((values, grads))
        })
        .collect::<Result<_>>()?;

    let mut total: Vec<Tensor> = net.parameters().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut values = Vec::with_capacity(items.len());
    for (v, grads) in per_item {
        for (acc, g) in total.iter_mut().zip(&grads) {
            acc.add_assign(g)?;
        }
        values.push(v);
    }
    Ok((summarize(items, &values), total))
}

/// Loss of a batch under an arbitrary velocity field.
pub(crate) fn evaluate_loss<F: VelocityField + ?Sized>(field: &F, items: &[LossItem]) -> Result<FlowLoss> {
    weights(items)?;
    let p = SsimParams::default();
    let values = items
        .iter()
        .map(|item| {
            let v = field.velocity(&item.z, item.t, item.d)?;
            let diff = v.sub(&item.target)?;
            let residual = diff.data().iter().map(|e| e * e).sum::<f64>() / diff.len() as f64;
            let content = match &item.clean {
                Some(clean) => {
                    let rhat = item.z.axpy(1.0 - item.t, &v)?;
                    let mut g = Graph::new();
                    let a = g.constant(rhat);
                    let b = g.constant(clean.clone());
                    let s = ssim_differentiable(&mut g, a, b, &p)?;
                    Some(g.value(s).item())
                }
                None => None,
            };
            Ok(ItemValues { residual, content })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(items, &values))
}

/// Finite-difference check of the full batch loss with respect to every
/// parameter of `net`.
pub(crate) fn gradcheck_items(net: &Network, items: &[LossItem]) -> Result<GradCheckReport> {
    let (rw, cw) = weights(items)?;
    check_gradients(&net.parameter_tensors(), |g, vars| {
        let mut acc: Option<Var> = None;
        for item in items {
            let (total, _, _) = item_graph(g, net, vars, item, rw, cw)?;
            acc = Some(match acc {
                Some(a) => g.add(a, total)?,
                None => total,
            });
        }
        Ok(acc.expect("non-empty batch"))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<FlowLoss>,
    /// Whether the content column is written.
    pub with_content: bool,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,cfm_loss,consistency_loss");
        if self.with_content {
            out.push_str(",content_loss");
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            write!(out, "{},{},{}", i + 1, r.cfm, r.consistency).expect("write to String");
            if self.with_content {
                write!(out, ",{}", r.content).expect("write to String");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub trace: LossTrace,
}

/// Adam on a freshly initialized network. `sample` builds each batch from the
/// current network (consistency targets depend on it).
pub(crate) fn run<S>(cfg: &CrfiTrainConfig, with_content: bool, mut sample: S) -> Result<TrainOutcome>
where
    S: FnMut(&mut ChaCha8Rng, &Network) -> Result<Vec<LossItem>>,
{
    cfg.validate()?;
    let mut net = Network::new(cfg.network, cfg.seed)?;
    let mut adam = AdamState::new(&net, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let items = sample(&mut rng, &net)?;
        let (loss, grads) = loss_and_gradients(&net, &items)?;
        if !loss.total().is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        adam_step(&mut net, &grads, &mut adam)?;
        if iter % 100 == 0 || iter + 1 == cfg.iterations {
            log::debug!(
                "iter={} cfm={:.6} consistency={:.6} content={:.6}",
                iter + 1,
                loss.cfm,
                loss.consistency,
                loss.content
            );
        }
        rows.push(loss);
    }
    Ok(TrainOutcome {
        net,
        trace: LossTrace { rows, with_content },
    })
}

/// Random `patch x patch` window (or the whole extent when smaller).
pub(crate) fn random_window(rng: &mut ChaCha8Rng, h: usize, w: usize, patch: usize) -> (usize, usize, usize, usize) {
    let (ph, pw) = (patch.min(h), patch.min(w));
    let top = rng.random_range(0..=h - ph);
    let left = rng.random_range(0..=w - pw);
    (top, left, ph, pw)
}

/// Crops a `[C, H, W]` tensor.
pub(crate) fn crop_chw(t: &Tensor, top: usize, left: usize, ph: usize, pw: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    debug_assert!(top + ph <= h && left + pw <= w);
    let mut data = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in top..top + ph {
            let row = ch * h * w + y * w;
            data.extend_from_slice(&t.data()[row + left..row + left + pw]);
        }
    }
    Tensor::new(vec![c, ph, pw], data).expect("crop within bounds")
}
