//! Explicit Euler transport of illumination maps and the full enhancement
//! pipeline (decompose, denoise reflectance, move illumination, recompose).

use crate::autodiff::{Network, Tensor, VelocityField};
use crate::crfr::denoise;
use crate::error::{Error, Result};
use crate::imagecore::{recompose, IlluminationMap, Image};
use crate::retinex::{decompose, DecompParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryConfig {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            t_start: 0.0,
            t_end: 1.0,
            steps: 1,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be >= 1"));
        }
        if !self.t_start.is_finite() || !self.t_end.is_finite() {
            return Err(Error::invalid("t_start/t_end", "must be finite"));
        }
        if self.t_start == self.t_end {
            return Err(Error::invalid("t_end", "must differ from t_start"));
        }
        Ok(())
    }

    /// Signed step `(t_end - t_start) / N`.
    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    /// `t_start + i * h` for `i = 0..=N`.
    pub fn times(&self) -> Vec<f64> {
        let h = self.step();
        (0..=self.steps).map(|i| self.t_start + i as f64 * h).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationSequence {
    /// Emitted maps, clamped to `[0, 1]`.
    pub levels: Vec<IlluminationMap>,
    /// Unclamped Euler states, `[1, H, W]`.
    pub states: Vec<Tensor>,
    pub times: Vec<f64>,
}

impl IlluminationSequence {
    pub fn last(&self) -> &IlluminationMap {
        self.levels.last().expect("sequence holds at least the initial state")
    }
}

/// `clamp01(L + v(L, 0, 0))`.
pub fn enhance_onestep<F: VelocityField + ?Sized>(field: &F, l: &IlluminationMap) -> Result<IlluminationMap> {
    let z = l.to_tensor();
    let v = field.velocity(&z, 0.0, 0.0)?;
    IlluminationMap::from_tensor_clamped(&z.add(&v)?)
}

/// `N` Euler steps from `l0`, evaluating the field at `(L_n, t_n, 0)`.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    l0: &IlluminationMap,
    cfg: &TrajectoryConfig,
) -> Result<IlluminationSequence> {
    cfg.validate()?;
    let h = cfg.step();
    let times = cfg.times();
    let mut states = Vec::with_capacity(cfg.steps + 1);
    states.push(l0.to_tensor());
    for &t in &times[..cfg.steps] {
        let z = states.last().expect("non-empty");
        let next = z.axpy(h, &field.velocity(z, t, 0.0)?)?;
        if !next.all_finite() {
            return Err(Error::NonFinite("illumination state"));
        }
        states.push(next);
    }
    let levels = states
        .iter()
        .map(IlluminationMap::from_tensor_clamped)
        .collect::<Result<_>>()?;
    Ok(IlluminationSequence { levels, states, times })
}

/// Recomposed frames of an enhancement run, one per emitted illumination level.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedSequence {
    pub frames: Vec<Image>,
    pub times: Vec<f64>,
}

impl EnhancedSequence {
    pub fn last(&self) -> &Image {
        self.frames.last().expect("at least one frame")
    }
}

/// Decomposes `img`, denoises its reflectance with `crfr`, moves its
/// illumination with `crfi`, and recomposes every level.
///
/// A single step over `[0, 1]` is the one-step path; the output then holds
/// the input-time frame followed by the enhanced one.
pub fn enhance_image(
    crfi: &Network,
    crfr: &Network,
    img: &Image,
    cfg: &TrajectoryConfig,
    decomp: &DecompParams,
) -> Result<EnhancedSequence> {
    if crfi.spec().in_channels != 1 {
        return Err(Error::Checkpoint("illumination checkpoint must have 1 input channel".into()).at_stage("illumination"));
    }
    if crfr.spec().in_channels != 3 {
        return Err(Error::Checkpoint("reflectance checkpoint must have 3 input channels".into()).at_stage("denoise"));
    }
    let parts = decompose(img, decomp).map_err(|e| e.at_stage("decompose"))?;
    let r_hat = denoise(crfr, &parts.r).map_err(|e| e.at_stage("denoise"))?;
    let seq = if cfg.steps == 1 && cfg.t_start == 0.0 && cfg.t_end == 1.0 {
        let last = enhance_onestep(crfi, &parts.l).map_err(|e| e.at_stage("illumination"))?;
        IlluminationSequence {
            states: vec![parts.l.to_tensor(), last.to_tensor()],
            levels: vec![parts.l.clone(), last],
            times: cfg.times(),
        }
    } else {
        integrate(crfi, &parts.l, cfg).map_err(|e| e.at_stage("illumination"))?
    };
    let frames = seq
        .levels
        .iter()
        .map(|l| recompose(l, &r_hat))
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("recompose"))?;
    Ok(EnhancedSequence {
        frames,
        times: seq.times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn times_are_exact_multiples() {
        let cfg = TrajectoryConfig {
            t_start: 1.0,
            t_end: -0.5,
            steps: 3,
        };
        assert_eq!(cfg.times(), vec![1.0, 0.5, 0.0, -0.5]);
        assert!(TrajectoryConfig { steps: 0, ..cfg }.validate().is_err());
        assert!(TrajectoryConfig { t_end: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn constant_field_transport_and_eval_count() {
        let calls = Cell::new(0);
        let field = |z: &Tensor, _: f64, _: f64| {
            calls.set(calls.get() + 1);
            Ok(Tensor::full(z.shape(), 0.3))
        };
        let l0 = IlluminationMap::filled(3, 3, 0.2).unwrap();
        for n in [1, 7, 50] {
            calls.set(0);
            let cfg = TrajectoryConfig { t_start: 0.0, t_end: 1.0, steps: n };
            let seq = integrate(&field, &l0, &cfg).unwrap();
            assert_eq!(calls.get(), n);
            assert_eq!(seq.levels.len(), n + 1);
            for v in seq.states.last().unwrap().data() {
                assert!((v - 0.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn states_stay_unclamped() {
        let field = |z: &Tensor, _: f64, _: f64| Ok(Tensor::full(z.shape(), 1.0));
        let l0 = IlluminationMap::filled(2, 2, 0.5).unwrap();
        let cfg = TrajectoryConfig { t_start: 0.0, t_end: 2.0, steps: 4 };
        let seq = integrate(&field, &l0, &cfg).unwrap();
        assert!((seq.states[4].data()[0] - 2.5).abs() < 1e-12);
        assert_eq!(seq.last().data()[0], 1.0);
    }

    #[test]
    fn onestep_matches_single_euler_step() {
        let field = |z: &Tensor, t: f64, _: f64| Ok(z.map(|v| 0.5 * v + t));
        let l0 = IlluminationMap::filled(2, 3, 0.4).unwrap();
        let one = enhance_onestep(&field, &l0).unwrap();
        let seq = integrate(&field, &l0, &TrajectoryConfig::default()).unwrap();
        assert_eq!(&one, seq.last());
    }
}
