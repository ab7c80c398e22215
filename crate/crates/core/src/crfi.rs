//! Rectified flow between low- and normal-light illumination maps, trained
//! with a flow-matching term and a shortcut self-consistency term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{GradCheckReport, Network, Tensor, VelocityField};
use crate::error::{Error, Result};
use crate::imagecore::{IlluminationMap, Image};
use crate::synthdata::TrainingPair;
use crate::training::{self, crop_chw, random_window, sample_shortcut_time, Half, LossItem};

pub use crate::training::{shortcut_target, CrfiTrainConfig, FlowLoss, LossTrace, TrainOutcome};

/// One point on the straight path from `x` to `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x: IlluminationMap,
    pub y: IlluminationMap,
    pub t: f64,
    /// Step size; zero for flow-matching samples.
    pub d: f64,
    pub phi_t: IlluminationMap,
}

impl FlowSample {
    pub fn new(x: IlluminationMap, y: IlluminationMap, t: f64, d: f64) -> Result<Self> {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(Error::invalid("d", format!("{d} (must be >= 0)")));
        }
        let phi_t = interpolate(&x, &y, t)?;
        Ok(Self { x, y, t, d, phi_t })
    }
}

fn check_pair(x: &IlluminationMap, y: &IlluminationMap) -> Result<()> {
    if !x.image().same_size(y.image()) {
        return Err(Error::shape(x.image().dims_string(), y.image().dims_string()));
    }
    Ok(())
}

/// `(1 - t) x + t y`.
pub fn interpolate(x: &IlluminationMap, y: &IlluminationMap, t: f64) -> Result<IlluminationMap> {
    check_pair(x, y)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("t", format!("{t} (must be in [0, 1])")));
    }
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| ((1.0 - t) * a + t * b).clamp(0.0, 1.0))
        .collect();
    IlluminationMap::new(Image::new(x.height(), x.width(), 1, data)?)
}

/// `y - x` as a `[1, H, W]` velocity.
pub fn target_velocity(x: &IlluminationMap, y: &IlluminationMap) -> Result<Tensor> {
    check_pair(x, y)?;
    y.to_tensor().sub(&x.to_tensor())
}

fn loss_items<F: VelocityField + ?Sized>(field: &F, batch: &[FlowSample]) -> Result<Vec<LossItem>> {
    let half = training::check_halves(
        &batch
            .iter()
            .enumerate()
            .map(|(i, s)| (if i < batch.len() / 2 { Half::Cfm } else { Half::Consistency }, s.d))
            .collect::<Vec<_>>(),
    )?;
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let z = s.phi_t.to_tensor();
            if i < half {
                Ok(LossItem {
                    half: Half::Cfm,
                    target: target_velocity(&s.x, &s.y)?,
                    z,
                    t: s.t,
                    d: 0.0,
                    clean: None,
                })
            } else {
                Ok(LossItem {
                    half: Half::Consistency,
                    target: shortcut_target(field, &z, s.t, s.d)?,
                    z,
                    t: s.t,
                    d: 2.0 * s.d,
                    clean: None,
                })
            }
        })
        .collect()
}

/// Flow-matching loss over the first half of `batch` plus the shortcut
/// consistency loss over the second half, both as per-pixel mean squares.
pub fn crfi_loss<F: VelocityField + ?Sized>(field: &F, batch: &[FlowSample]) -> Result<FlowLoss> {
    training::evaluate_loss(field, &loss_items(field, batch)?)
}

/// Finite-difference check of [`crfi_loss`] against backpropagation through `net`.
pub fn crfi_loss_gradcheck(net: &Network, batch: &[FlowSample]) -> Result<GradCheckReport> {
    training::gradcheck_items(net, &loss_items(net, batch)?)
}

/// Uniform sampling with replacement over `(low, normal)` illumination pairs.
#[derive(Debug, Clone)]
pub struct DatasetSampler {
    pairs: Vec<(Tensor, Tensor)>,
    rng: ChaCha8Rng,
}

impl DatasetSampler {
    pub fn new(pairs: Vec<(IlluminationMap, IlluminationMap)>, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("dataset", "no pairs"));
        }
        for (x, y) in &pairs {
            check_pair(x, y)?;
        }
        Ok(Self {
            pairs: pairs.iter().map(|(x, y)| (x.to_tensor(), y.to_tensor())).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn from_training_pairs(pairs: &[TrainingPair], seed: u64) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|p| (p.low_illum.clone(), p.normal_illum.clone()))
                .collect(),
            seed,
        )
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Co-located crops of a uniformly chosen pair.
    fn draw(&mut self, patch: usize) -> (Tensor, Tensor) {
        let (x, y) = &self.pairs[self.rng.random_range(0..self.pairs.len())];
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (top, left, ph, pw) = random_window(&mut self.rng, h, w, patch);
        (crop_chw(x, top, left, ph, pw), crop_chw(y, top, left, ph, pw))
    }
}

/// Pairs of constant `side x side` maps with `x ~ U[0, 1 - offset]` and `y = x + offset`.
pub fn offset_toy_pairs(count: usize, side: usize, offset: f64, seed: u64) -> Result<Vec<(IlluminationMap, IlluminationMap)>> {
    if !(0.0..1.0).contains(&offset) {
        return Err(Error::invalid("offset", format!("{offset} (must be in [0, 1))")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = rng.random_range(0.0..=1.0 - offset);
            Ok((IlluminationMap::filled(side, side, x)?, IlluminationMap::filled(side, side, x + offset)?))
        })
        .collect()
}

pub fn train_crfi(sampler: &mut DatasetSampler, cfg: &CrfiTrainConfig) -> Result<TrainOutcome> {
    if cfg.network.in_channels != 1 {
        return Err(Error::invalid("network.in_channels", "illumination flow needs 1 channel"));
    }
    let half = cfg.batch_size / 2;
    training::run(cfg, false, |rng, net| {
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size {
            let (x, y) = sampler.draw(cfg.patch_size);
            let (t, d) = if i < half {
                (rng.random_range(0.0..=1.0), 0.0)
            } else {
                sample_shortcut_time(rng, cfg.d_levels)
            };
            draws.push((x, y, t, d));
        }
        draws
            .into_par_iter()
            .map(|(x, y, t, d)| {
                let z = x.scale(1.0 - t).axpy(t, &y)?;
                if d == 0.0 {
                    Ok(LossItem {
                        half: Half::Cfm,
                        target: y.sub(&x)?,
                        z,
                        t,
                        d: 0.0,
                        clean: None,
                    })
                } else {
                    Ok(LossItem {
                        half: Half::Consistency,
                        target: shortcut_target(net, &z, t, d)?,
                        z,
                        t,
                        d: 2.0 * d,
                        clean: None,
                    })
                }
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NetworkSpec;

    fn map(v: f64) -> IlluminationMap {
        IlluminationMap::filled(4, 4, v).unwrap()
    }

    #[test]
    fn path_examples() {
        assert_eq!(interpolate(&map(0.2), &map(0.8), 0.0).unwrap(), map(0.2));
        assert_eq!(interpolate(&map(0.2), &map(0.8), 1.0).unwrap(), map(0.8));
        let mid = interpolate(&map(0.2), &map(0.8), 0.5).unwrap();
        assert!(mid.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
        let v = target_velocity(&map(0.2), &map(0.8)).unwrap();
        assert!(v.data().iter().all(|v| (v - 0.6).abs() < 1e-15));
        assert!(interpolate(&map(0.2), &IlluminationMap::filled(4, 5, 0.1).unwrap(), 0.5).is_err());
    }

    fn batch(x: f64, y: f64) -> Vec<FlowSample> {
        vec![
            FlowSample::new(map(x), map(y), 0.3, 0.0).unwrap(),
            FlowSample::new(map(x), map(y), 0.1, 0.0).unwrap(),
            FlowSample::new(map(x), map(y), 0.2, 0.25).unwrap(),
            FlowSample::new(map(x), map(y), 0.0, 0.5).unwrap(),
        ]
    }

    #[test]
    fn loss_examples() {
        let zero = |z: &Tensor, _: f64, _: f64| Ok(Tensor::zeros(z.shape()));
        let l = crfi_loss(&zero, &batch(0.4, 0.4)).unwrap();
        assert_eq!(l.total(), 0.0);
        let l = crfi_loss(&zero, &batch(0.2, 0.8)).unwrap();
        assert!((l.cfm - 0.36).abs() < 1e-12);
        assert_eq!(l.consistency, 0.0);

        let perfect = |z: &Tensor, _: f64, _: f64| Ok(Tensor::full(z.shape(), 0.6));
        assert!(crfi_loss(&perfect, &batch(0.2, 0.8)).unwrap().total() < 1e-24);

        let net = Network::new(NetworkSpec { in_channels: 1, hidden_channels: 2, depth: 1, embed_dim: 2 }, 0).unwrap();
        assert_eq!(crfi_loss(&net, &batch(0.4, 0.4)).unwrap().total(), 0.0);
    }

    #[test]
    fn malformed_batches() {
        let zero = |z: &Tensor, _: f64, _: f64| Ok(Tensor::zeros(z.shape()));
        let mut b = batch(0.2, 0.8);
        b.pop();
        assert!(matches!(crfi_loss(&zero, &b), Err(Error::MalformedBatch(_))));
        let mut b = batch(0.2, 0.8);
        b.swap(0, 3);
        assert!(matches!(crfi_loss(&zero, &b), Err(Error::MalformedBatch(_))));
    }

    #[test]
    fn toy_pairs_have_constant_offset() {
        for (x, y) in offset_toy_pairs(10, 3, 0.5, 1).unwrap() {
            let v = target_velocity(&x, &y).unwrap();
            assert!(v.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        }
    }
}
