//! Residual reflectance denoiser trained on points of the straight path from
//! noisy to clean reflectance, with one-step inference at `t = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{GradCheckReport, Network, Tensor, VelocityField};
use crate::error::{Error, Result};
use crate::imagecore::{Image, ReflectanceMap};
use crate::metrics::SsimParams;
use crate::synthdata::{inject_noise, noise_seed, render_scene, NoiseSpec, TrainingPair};
use crate::training::{self, crop_chw, random_window, sample_shortcut_time, shortcut_target, Half, LossItem};

pub use crate::training::{CrfiTrainConfig, FlowLoss, LossTrace, TrainOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectancePair {
    pub noisy: ReflectanceMap,
    pub clean: ReflectanceMap,
}

impl ReflectancePair {
    pub fn new(noisy: ReflectanceMap, clean: ReflectanceMap) -> Result<Self> {
        noisy.image().expect_congruent(clean.image())?;
        Ok(Self { noisy, clean })
    }
}

/// A blend `R_t = R_l + t (R_n - R_l)` together with its source pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub r_t: ReflectanceMap,
    pub t: f64,
    /// Step size; zero for flow-matching samples.
    pub d: f64,
    pub pair: ReflectancePair,
}

fn blend(a: &Tensor, b: &Tensor, t: f64) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + t * (y - x))
}

pub fn augment(pair: &ReflectancePair, t: f64) -> Result<AugmentedSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("t", format!("{t} (must be in [0, 1])")));
    }
    let data = pair
        .noisy
        .data()
        .iter()
        .zip(pair.clean.data())
        .map(|(&l, &n)| (l + t * (n - l)).clamp(0.0, 1.0))
        .collect();
    let img = pair.noisy.image();
    Ok(AugmentedSample {
        r_t: ReflectanceMap::new(Image::new(img.height(), img.width(), 3, data)?)?,
        t,
        d: 0.0,
        pair: pair.clone(),
    })
}

/// `clamp01(r_t + (1 - t) v)` for a `[3, H, W]` velocity `v`.
pub fn reconstruct(r_t: &ReflectanceMap, t: f64, v: &Tensor) -> Result<ReflectanceMap> {
    let rt = r_t.to_tensor();
    v.expect_shape(rt.shape())?;
    ReflectanceMap::from_tensor_clamped(&rt.axpy(1.0 - t, v)?)
}

fn loss_items<F: VelocityField + ?Sized>(field: &F, batch: &[AugmentedSample]) -> Result<Vec<LossItem>> {
    let kinds: Vec<(Half, f64)> = batch
        .iter()
        .enumerate()
        .map(|(i, s)| (if i < batch.len() / 2 { Half::Cfm } else { Half::Consistency }, s.d))
        .collect();
    let half = training::check_halves(&kinds)?;
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let z = s.r_t.to_tensor();
            let clean = s.pair.clean.to_tensor();
            let (kind, target, d) = if i < half {
                (Half::Cfm, clean.sub(&s.pair.noisy.to_tensor())?, 0.0)
            } else {
                (Half::Consistency, shortcut_target(field, &z, s.t, s.d)?, 2.0 * s.d)
            };
            Ok(LossItem {
                half: kind,
                z,
                t: s.t,
                d,
                target,
                clean: Some(clean),
            })
        })
        .collect()
}

/// Mean `1 - SSIM(R_hat, R_n)` over the batch plus the flow-matching and
/// consistency terms of [`crate::crfi::crfi_loss`], targeting `R_n - R_l`.
pub fn crfr_loss<F: VelocityField + ?Sized>(field: &F, batch: &[AugmentedSample]) -> Result<FlowLoss> {
    training::evaluate_loss(field, &loss_items(field, batch)?)
}

pub fn crfr_loss_gradcheck(net: &Network, batch: &[AugmentedSample]) -> Result<GradCheckReport> {
    training::gradcheck_items(net, &loss_items(net, batch)?)
}

/// Uniform sampling with replacement over reflectance pairs.
#[derive(Debug, Clone)]
pub struct ReflectanceSampler {
    pairs: Vec<(Tensor, Tensor)>,
    rng: ChaCha8Rng,
}

impl ReflectanceSampler {
    pub fn new(pairs: &[ReflectancePair], seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("dataset", "no pairs"));
        }
        Ok(Self {
            pairs: pairs.iter().map(|p| (p.noisy.to_tensor(), p.clean.to_tensor())).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn from_training_pairs(pairs: &[TrainingPair], seed: u64) -> Result<Self> {
        let refl = pairs
            .iter()
            .map(|p| ReflectancePair::new(p.low_refl.clone(), p.normal_refl.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(&refl, seed)
    }

    fn draw(&mut self, patch: usize) -> (Tensor, Tensor) {
        let (x, y) = &self.pairs[self.rng.random_range(0..self.pairs.len())];
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (top, left, ph, pw) = random_window(&mut self.rng, h, w, patch);
        (crop_chw(x, top, left, ph, pw), crop_chw(y, top, left, ph, pw))
    }
}

/// Noisy/clean reflectance of scenes `first_seed..first_seed + count`.
pub fn synthetic_pairs(
    count: usize,
    size: (usize, usize),
    noise: &NoiseSpec,
    first_seed: u64,
) -> Result<Vec<ReflectancePair>> {
    (0..count as u64)
        .map(|i| {
            let seed = first_seed + i;
            let clean = render_scene(seed, size)?.true_reflectance;
            let noisy = inject_noise(&clean, noise, noise_seed(seed))?;
            ReflectancePair::new(noisy, clean)
        })
        .collect()
}

pub fn train_crfr(sampler: &mut ReflectanceSampler, cfg: &CrfiTrainConfig) -> Result<TrainOutcome> {
    if cfg.network.in_channels != 3 {
        return Err(Error::invalid("network.in_channels", "reflectance denoiser needs 3 channels"));
    }
    let window = SsimParams::default().window;
    if cfg.patch_size < window {
        return Err(Error::invalid(
            "patch_size",
            format!("{} (the SSIM term needs at least {window})", cfg.patch_size),
        ));
    }
    let half = cfg.batch_size / 2;
    training::run(cfg, true, |rng, net| {
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size {
            let (noisy, clean) = sampler.draw(cfg.patch_size);
            let (t, d) = if i < half {
                (rng.random_range(0.0..=1.0), 0.0)
            } else {
                sample_shortcut_time(rng, cfg.d_levels)
            };
            draws.push((noisy, clean, t, d));
        }
        draws
            .into_par_iter()
            .map(|(noisy, clean, t, d)| {
                let z = blend(&noisy, &clean, t)?;
                let (half, target, d) = if d == 0.0 {
                    (Half::Cfm, clean.sub(&noisy)?, 0.0)
                } else {
                    (Half::Consistency, shortcut_target(net, &z, t, d)?, 2.0 * d)
                };
                Ok(LossItem {
                    half,
                    z,
                    t,
                    d,
                    target,
                    clean: Some(clean),
                })
            })
            .collect()
    })
}

/// `clamp01(R_l + v(R_l, 0, 0))`, a single network evaluation.
pub fn denoise<F: VelocityField + ?Sized>(field: &F, r_l: &ReflectanceMap) -> Result<ReflectanceMap> {
    let v = field.velocity(&r_l.to_tensor(), 0.0, 0.0)?;
    reconstruct(r_l, 0.0, &v)
}
