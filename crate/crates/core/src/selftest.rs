//! Invariant suite behind the `selftest` and `gradcheck` subcommands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    adam_step, gradient_check_report, primitive_gradchecks, read_checkpoint, write_checkpoint, AdamState,
    GradCheckReport, Network, NetworkSpec, Tensor, VelocityField,
};
use crate::crfi::{self, crfi_loss_gradcheck, interpolate, offset_toy_pairs, target_velocity, FlowSample};
use crate::crfr::{self, augment, crfr_loss_gradcheck, reconstruct, AugmentedSample, ReflectancePair};
use crate::error::Result;
use crate::imagecore::{recompose, IlluminationMap, Image, ReflectanceMap};
use crate::integrator::{integrate, TrajectoryConfig};
use crate::mef::{fuse, normalized_weights, FusionParams};
use crate::metrics::{psnr, ssim, SsimParams};
use crate::retinex::{decompose, DecompParams};
use crate::synthdata::{expose, make_pair, render_scene, ExposureSpec, NoiseSpec};
use crate::training::CrfiTrainConfig;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub module: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(module: &'static str, name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            module,
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(module: &'static str, name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(module, name, passed, detail),
            Err(e) => Self::new(module, name, false, format!("error: {e}")),
        }
    }

    /// `pass module/name detail` or `fail module/name detail`.
    pub fn line(&self) -> String {
        let status = if self.passed { "pass" } else { "fail" };
        format!("{status} {}/{} {}", self.module, self.name, self.detail)
    }
}

fn tiny_spec(in_channels: usize) -> NetworkSpec {
    NetworkSpec {
        in_channels,
        hidden_channels: 2,
        depth: 1,
        embed_dim: 2,
    }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Result<Image> {
    Image::new(h, w, ch, (0..h * w * ch).map(|_| rng.random_range(0.0..1.0)).collect())
}

/// Finite-difference checks of every primitive, the network, and the two
/// composed training losses.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out: Vec<(String, GradCheckReport)> = primitive_gradchecks(seed)?
        .into_iter()
        .map(|(n, r)| (n.to_string(), r))
        .collect();

    let net = Network::with_random_head(
        NetworkSpec {
            in_channels: 2,
            hidden_channels: 3,
            depth: 2,
            embed_dim: 2,
        },
        seed,
    )?;
    out.push(("network".into(), gradient_check_report(&net, seed)?));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let illum = Network::with_random_head(tiny_spec(1), seed)?;
    let mut batch = Vec::new();
    for (t, d) in [(0.3, 0.0), (0.8, 0.0), (0.1, 0.25), (0.5, 0.125)] {
        let x = IlluminationMap::new(random_map(&mut rng, 5, 4, 1)?)?;
        let y = IlluminationMap::new(random_map(&mut rng, 5, 4, 1)?)?;
        batch.push(FlowSample::new(x, y, t, d)?);
    }
    out.push(("crfi_loss".into(), crfi_loss_gradcheck(&illum, &batch)?));

    let refl = Network::with_random_head(tiny_spec(3), seed)?;
    let mut batch = Vec::new();
    for (t, d) in [(0.2, 0.0), (0.0, 0.5)] {
        let pair = ReflectancePair::new(
            ReflectanceMap::new(random_map(&mut rng, 12, 12, 3)?)?,
            ReflectanceMap::new(random_map(&mut rng, 12, 12, 3)?)?,
        )?;
        batch.push(AugmentedSample {
            d,
            ..augment(&pair, t)?
        });
    }
    out.push(("crfr_loss".into(), crfr_loss_gradcheck(&refl, &batch)?));
    Ok(out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn imagecore_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let r = (|| {
        let l = IlluminationMap::new(random_map(rng, 6, 5, 1)?)?;
        let ones = ReflectanceMap::new(Image::filled(6, 5, 3, 1.0)?)?;
        let img = recompose(&l, &ones)?;
        let err = img
            .data()
            .chunks_exact(3)
            .zip(l.data())
            .map(|(px, &lv)| px.iter().map(|v| (v - lv).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        Ok((err < 1e-12, format!("max_err={err:e}")))
    })();
    vec![Check::from_result("imagecore", "recompose_unit_reflectance", r)]
}

fn synthdata_checks(seed: u64) -> Vec<Check> {
    let determinism = (|| {
        let a = render_scene(seed, (16, 16))?;
        let b = render_scene(seed, (16, 16))?;
        Ok((a == b, String::new()))
    })();
    let linearity = (|| {
        let scene = render_scene(seed, (16, 16))?;
        let base = expose(&scene, &ExposureSpec::linear(1.0)?)?;
        let mut worst: f64 = 0.0;
        for k in 1..=10 {
            let delta = k as f64 / 10.0;
            let img = expose(&scene, &ExposureSpec::linear(delta)?)?;
            for (v, b) in img.data().iter().zip(base.data()) {
                worst = worst.max((v - delta * b).abs());
            }
        }
        Ok((worst < 1e-12, format!("max_err={worst:e}")))
    })();
    let pair = (|| {
        let scene = render_scene(seed, (16, 16))?;
        let p = make_pair(&scene, 1.0, &NoiseSpec::default(), seed)?;
        let err = max_abs_diff(p.low.data(), p.normal.data());
        Ok((err < 1e-6, format!("max_err={err:e}")))
    })();
    vec![
        Check::from_result("synthdata", "deterministic_scene", determinism),
        Check::from_result("synthdata", "exposure_linear_in_delta", linearity),
        Check::from_result("synthdata", "degenerate_pair", pair),
    ]
}

fn retinex_checks(seed: u64) -> Vec<Check> {
    let r = (|| {
        let scene = render_scene(seed, (32, 32))?;
        let img = expose(&scene, &ExposureSpec::linear(1.0)?)?;
        let res = decompose(&img, &DecompParams::default())?;
        let mono = res.objective_trace.windows(2).all(|w| w[1] <= w[0]);
        let back = recompose(&res.l, &res.r)?;
        let mse = crate::metrics::mse(&back, &img)?;
        Ok((mono && mse.sqrt() < 1e-2, format!("monotone={mono} rmse={:.5}", mse.sqrt())))
    })();
    vec![Check::from_result("retinex", "descent_and_fidelity", r)]
}

fn autodiff_checks(seed: u64) -> Vec<Check> {
    let grad = (|| {
        let suite = gradcheck_suite(seed)?;
        let worst = suite.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
        Ok((worst < GRADCHECK_TOLERANCE, format!("max_rel_error={worst:e}")))
    })();
    let adam = (|| {
        let mut net = Network::with_random_head(tiny_spec(1), seed)?;
        let before = net.parameter_tensors();
        let zeros: Vec<Tensor> = before.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut state = AdamState::new(&net, 1e-4);
        adam_step(&mut net, &zeros, &mut state)?;
        Ok((net.parameter_tensors() == before && state.step == 1, String::new()))
    })();
    let ckpt = (|| {
        let net = Network::with_random_head(tiny_spec(3), seed)?;
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf)?;
        let back = read_checkpoint(buf.as_slice())?;
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again)?;
        Ok((buf == again && &buf[..4] == b"IFLW", format!("bytes={}", buf.len())))
    })();
    let zero_head = (|| {
        let net = Network::new(tiny_spec(1), seed)?;
        let v = net.velocity(&Tensor::full(&[1, 4, 4], 0.3), 0.5, 0.0)?;
        Ok((v.max_abs() == 0.0, String::new()))
    })();
    vec![
        Check::from_result("autodiff", "gradients_match_finite_differences", grad),
        Check::from_result("autodiff", "adam_null_update", adam),
        Check::from_result("autodiff", "checkpoint_round_trip", ckpt),
        Check::from_result("autodiff", "zero_head_is_identity_flow", zero_head),
    ]
}

fn crfi_checks(rng: &mut ChaCha8Rng, seed: u64) -> Vec<Check> {
    let paths = (|| {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = IlluminationMap::new(random_map(rng, 2, 2, 1)?)?;
            let y = IlluminationMap::new(random_map(rng, 2, 2, 1)?)?;
            let t = rng.random_range(0.0..1.0);
            let phi = interpolate(&x, &y, t)?;
            let v = target_velocity(&x, &y)?;
            for ((p, vv), yy) in phi.data().iter().zip(v.data()).zip(y.data()) {
                worst = worst.max((p + (1.0 - t) * vv - yy).abs());
            }
            worst = worst.max(max_abs_diff(interpolate(&x, &y, 0.0)?.data(), x.data()));
            worst = worst.max(max_abs_diff(interpolate(&x, &y, 1.0)?.data(), y.data()));
        }
        Ok((worst < 1e-6, format!("max_err={worst:e}")))
    })();
    let shortcut = (|| {
        let identity = |z: &Tensor, _: f64, _: f64| Ok(z.clone());
        let s = crfi::shortcut_target(&identity, &Tensor::full(&[1, 1, 1], 0.4), 0.0, 0.25)?;
        Ok(((s.item() - 0.45).abs() < 1e-12, format!("s_target={}", s.item())))
    })();
    let toy = (|| {
        let pairs = offset_toy_pairs(256, 4, 0.5, seed)?;
        let mut sampler = crfi::DatasetSampler::new(pairs, seed)?;
        let cfg = toy_flow_config(seed, 1000);
        let net = crfi::train_crfi(&mut sampler, &cfg)?.net;
        let worst = toy_probe_error(&net)?;
        Ok((worst < 0.05, format!("max_probe_error={worst:.4}")))
    })();
    vec![
        Check::from_result("crfi", "straight_path_identities", paths),
        Check::from_result("crfi", "shortcut_hand_example", shortcut),
        Check::from_result("crfi", "toy_flow_recovery", toy),
    ]
}

/// Desk-scale profile for the constant-offset toy flow.
pub fn toy_flow_config(seed: u64, iterations: usize) -> CrfiTrainConfig {
    CrfiTrainConfig {
        batch_size: 8,
        iterations,
        lr: 3e-3,
        d_levels: 6,
        seed,
        patch_size: 4,
        network: NetworkSpec {
            in_channels: 1,
            hidden_channels: 8,
            depth: 1,
            embed_dim: 8,
        },
    }
}

/// Worst `|v(z, t, 0) - 0.5|` on a 10 x 10 grid covering the support of the
/// offset toy path (`z` in `[t/2, t/2 + 1/2]`).
pub fn toy_probe_error<F: VelocityField + ?Sized>(field: &F) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let t = i as f64 / 9.0;
        for k in 0..10 {
            let z = 0.5 * t + 0.5 * k as f64 / 9.0;
            let v = field.velocity(&Tensor::full(&[1, 4, 4], z), t, 0.0)?;
            worst = v.data().iter().fold(worst, |w, e| w.max((e - 0.5).abs()));
        }
    }
    Ok(worst)
}

fn crfr_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let r = (|| {
        let pair = ReflectancePair::new(
            ReflectanceMap::new(random_map(rng, 4, 4, 3)?)?,
            ReflectanceMap::new(random_map(rng, 4, 4, 3)?)?,
        )?;
        let v = pair.clean.to_tensor().sub(&pair.noisy.to_tensor())?;
        let mut worst: f64 = 0.0;
        for t in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let s = augment(&pair, t)?;
            worst = worst.max(max_abs_diff(reconstruct(&s.r_t, t, &v)?.data(), pair.clean.data()));
        }
        let zero = |z: &Tensor, _: f64, _: f64| Ok(Tensor::zeros(z.shape()));
        let same = crfr::denoise(&zero, &pair.noisy)? == pair.noisy;
        Ok((worst < 1e-12 && same, format!("max_err={worst:e}")))
    })();
    vec![Check::from_result("crfr", "residual_reconstruction", r)]
}

fn integrator_checks() -> Vec<Check> {
    let r = (|| {
        let field = |z: &Tensor, _: f64, _: f64| Ok(Tensor::full(z.shape(), 0.37));
        let l0 = IlluminationMap::filled(3, 3, 0.2)?;
        let mut worst: f64 = 0.0;
        for n in [1, 7, 50] {
            let fwd = integrate(&field, &l0, &TrajectoryConfig { t_start: 0.0, t_end: 1.0, steps: n })?;
            let end = fwd.states.last().expect("non-empty");
            worst = end.data().iter().fold(worst, |w, v| w.max((v - 0.57).abs()));
            let back = integrate(&field, &IlluminationMap::from_tensor_clamped(end)?, &TrajectoryConfig {
                t_start: 1.0,
                t_end: 0.0,
                steps: n,
            })?;
            worst = worst.max(max_abs_diff(back.states.last().expect("non-empty").data(), l0.data()));
        }
        Ok((worst < 1e-9, format!("max_err={worst:e}")))
    })();
    vec![Check::from_result("integrator", "constant_field_exactness", r)]
}

fn metrics_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let r = (|| {
        let p = SsimParams::default();
        let zeros = Image::filled(12, 12, 1, 0.0)?;
        let ones = Image::filled(12, 12, 1, 1.0)?;
        let closed = p.c1 / (1.0 + p.c1);
        let s = ssim(&zeros, &ones, &p)?;
        let a = random_map(rng, 16, 16, 3)?;
        let b = random_map(rng, 16, 16, 3)?;
        let sym = (ssim(&a, &b, &p)? - ssim(&b, &a, &p)?).abs() < 1e-12 && psnr(&a, &b)? == psnr(&b, &a)?;
        Ok((
            (s - closed).abs() < 1e-9 && psnr(&a, &a)? == 99.0 && psnr(&zeros, &ones)?.abs() < 1e-12 && sym,
            format!("ssim_const={s:e}"),
        ))
    })();
    vec![Check::from_result("metrics", "closed_forms_and_symmetry", r)]
}

fn mef_checks(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let r = (|| {
        let p = FusionParams::default();
        let a = random_map(rng, 16, 16, 3)?;
        let b = random_map(rng, 16, 16, 3)?;
        let same = fuse(&[a.clone(), a.clone(), a.clone()], &p)?;
        let idem = max_abs_diff(same.data(), a.data());
        let weights = normalized_weights(&[a.clone(), b.clone()], &p);
        let norm = (0..weights[0].len())
            .map(|q| (weights[0][q] + weights[1][q] - 1.0).abs())
            .fold(0.0, f64::max);
        let perm = max_abs_diff(fuse(&[a.clone(), b.clone()], &p)?.data(), fuse(&[b, a], &p)?.data());
        Ok((
            idem < 1e-6 && norm < 1e-9 && perm < 1e-9,
            format!("idempotence={idem:e} weight_sum={norm:e} permutation={perm:e}"),
        ))
    })();
    vec![Check::from_result("mef", "idempotence_normalization_permutation", r)]
}

/// Runs every module's invariant checks.
pub fn run_selftest(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    out.extend(imagecore_checks(&mut rng));
    out.extend(synthdata_checks(seed));
    out.extend(retinex_checks(seed));
    out.extend(autodiff_checks(seed));
    out.extend(crfi_checks(&mut rng, seed));
    out.extend(crfr_checks(&mut rng));
    out.extend(integrator_checks());
    out.extend(metrics_checks(&mut rng));
    out.extend(mef_checks(&mut rng));
    out
}
