//! Central finite-difference verification of [`Graph::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Network, Tensor, Var};
use crate::error::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients of `loss` against central differences for every
/// element of every tensor in `params`.
///
/// `loss` must record a single-element loss on the graph it is given, using
/// the supplied handles for the parameters.
pub fn check_gradients<F>(params: &[Tensor], loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = loss(&mut g, &vars)?;
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = params.to_vec();
    for (ti, tensor) in params.iter().enumerate() {
        for ei in 0..tensor.len() {
            let orig = tensor.data()[ei];
            probe[ti].data_mut()[ei] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[ti].data()[ei], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Worst relative gradient error of `net` under a random linear functional of
/// its output on a random input batch.
pub fn gradient_check(net: &Network, seed: u64) -> Result<f64> {
    Ok(gradient_check_report(net, seed)?.max_rel_error)
}

pub fn gradient_check_report(net: &Network, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = net.spec().in_channels;
    let (n, h, w) = (2, 5, 4);
    let numel = n * c * h * w;
    let z = Tensor::new(
        vec![n, c, h, w],
        (0..numel).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let proj = Tensor::new(
        vec![n, c, h, w],
        (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();

    check_gradients(&net.parameter_tensors(), |g, vars| {
        let zv = g.constant(z.clone());
        let out = net.forward_graph(g, vars, zv, &t, &d)?;
        let pv = g.constant(proj.clone());
        let weighted = g.mul(out, pv)?;
        Ok(g.sum(weighted))
    })
}

type LossFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape and data agree")
}

/// Gradient check of every graph primitive in isolation (each wrapped in a
/// nonlinear reduction so the check is not trivially exact).
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[1, 2, 4, 4], 0.5, 1.5);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = random_tensor(&mut rng, &[3], -1.0, 1.0);
    let dense_w = random_tensor(&mut rng, &[2, 5], -1.0, 1.0);
    let dense_in = random_tensor(&mut rng, &[1, 5], -1.0, 1.0);
    let dense_b = random_tensor(&mut rng, &[2], -1.0, 1.0);
    let chan_bias = random_tensor(&mut rng, &[1, 2], -1.0, 1.0);
    let img_a = random_tensor(&mut rng, &[1, 2, 12, 13], 0.0, 1.0);
    let img_b = random_tensor(&mut rng, &[1, 2, 12, 13], 0.0, 1.0);

    let cases: Vec<(&'static str, Vec<Tensor>, LossFn)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| { let x = g.add(v[0], v[1])?; let x = g.square(x); Ok(g.sum(x)) })),
        ("sub_mse", vec![a.clone(), b.clone()], Box::new(|g, v| g.mse(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| { let x = g.mul(v[0], v[1])?; let x = g.square(x); Ok(g.mean(x)) })),
        ("div", vec![a.clone(), b.clone()], Box::new(|g, v| { let x = g.div(v[0], v[1])?; let x = g.square(x); Ok(g.sum(x)) })),
        ("scale_add_scalar", vec![a.clone()], Box::new(|g, v| { let x = g.scale(v[0], -1.7); let x = g.add_scalar(x, 0.3); let x = g.square(x); Ok(g.sum(x)) })),
        ("silu", vec![a.clone()], Box::new(|g, v| { let x = g.silu(v[0]); let x = g.square(x); Ok(g.sum(x)) })),
        ("conv2d", vec![a.clone(), w, bias], Box::new(|g, v| { let x = g.conv2d(v[0], v[1], v[2])?; let x = g.square(x); Ok(g.sum(x)) })),
        ("dense", vec![dense_in, dense_w, dense_b], Box::new(|g, v| { let x = g.dense(v[0], v[1], v[2])?; let x = g.square(x); Ok(g.sum(x)) })),
        ("add_channel_bias", vec![a.clone(), chan_bias], Box::new(|g, v| { let x = g.add_channel_bias(v[0], v[1])?; let x = g.square(x); Ok(g.sum(x)) })),
        ("blur_valid", vec![a], Box::new(|g, v| { let x = g.blur_valid(v[0], &[0.2, 0.5, 0.3])?; let x = g.square(x); Ok(g.sum(x)) })),
        ("ssim", vec![img_a, img_b], Box::new(|g, v| crate::metrics::ssim_differentiable(g, v[0], v[1], &crate::metrics::SsimParams::default()))),
    ];
    cases
        .into_iter()
        .map(|(name, params, f)| Ok((name, check_gradients(&params, f)?)))
        .collect()
}
