//! Full-reference quality metrics: PSNR, Gaussian-window SSIM (plain and as a
//! differentiable graph node), and per-step evaluation of image sequences.

use std::fmt::Write as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imagecore::Image;

pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        let dynamic_range = 1.0;
        Self {
            window: 11,
            sigma: 1.5,
            c1: (0.01 * dynamic_range) * (0.01 * dynamic_range),
            c2: (0.03 * dynamic_range) * (0.03 * dynamic_range),
            dynamic_range,
        }
    }
}

impl SsimParams {
    fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::invalid("ssim window", format!("{} is even", self.window)));
        }
        if self.sigma <= 0.0 {
            return Err(Error::invalid("ssim sigma", format!("{}", self.sigma)));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn gaussian_taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.expect_congruent(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / MSE)` for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = mse(a, b)?;
    if mse < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over all valid window positions and channels.
pub fn ssim(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    a.expect_congruent(b)?;
    let mut g = Graph::new();
    let av = g.constant(a.to_tensor());
    let bv = g.constant(b.to_tensor());
    let out = ssim_differentiable(&mut g, av, bv, p)?;
    Ok(g.value(out).item())
}

/// Records mean SSIM between two equally shaped `[..., H, W]` nodes on `g`.
pub fn ssim_differentiable(g: &mut Graph, a: Var, b: Var, p: &SsimParams) -> Result<Var> {
    p.validate()?;
    let shape = g.value(a).shape().to_vec();
    g.value(b).expect_shape(&shape)?;
    let rank = shape.len();
    if rank < 2 || shape[rank - 2] < p.window || shape[rank - 1] < p.window {
        return Err(Error::invalid(
            "ssim input",
            format!("{shape:?} is smaller than the {}-pixel window", p.window),
        ));
    }
    let taps = p.gaussian_taps();

    let mu_a = g.blur_valid(a, &taps)?;
    let mu_b = g.blur_valid(b, &taps)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.blur_valid(aa, &taps)?;
    let e_bb = g.blur_valid(bb, &taps)?;
    let e_ab = g.blur_valid(ab, &taps)?;

    let mu_a2 = g.square(mu_a);
    let mu_b2 = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_a2)?;
    let var_b = g.sub(e_bb, mu_b2)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let lum_num = g.scale(mu_ab, 2.0);
    let lum_num = g.add_scalar(lum_num, p.c1);
    let cs_num = g.scale(cov, 2.0);
    let cs_num = g.add_scalar(cs_num, p.c2);
    let lum_den = g.add(mu_a2, mu_b2)?;
    let lum_den = g.add_scalar(lum_den, p.c1);
    let cs_den = g.add(var_a, var_b)?;
    let cs_den = g.add_scalar(cs_den, p.c2);

    let num = g.mul(lum_num, cs_num)?;
    let den = g.mul(lum_den, cs_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRow {
    pub step: usize,
    pub t: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub rows: Vec<SequenceRow>,
}

impl SequenceReport {
    /// Step index of the highest PSNR (first one on ties).
    pub fn argmax_psnr(&self) -> usize {
        let mut best = 0;
        for (i, row) in self.rows.iter().enumerate() {
            if row.psnr_db > self.rows[best].psnr_db {
                best = i;
            }
        }
        self.rows[best].step
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,t,psnr_db,ssim\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.step, r.t, r.psnr_db, r.ssim).expect("write to String");
        }
        out
    }
}

/// PSNR and SSIM of every sequence element against `reference`.
pub fn sequence_metrics(
    seq: &[Image],
    times: &[f64],
    reference: &Image,
    p: &SsimParams,
) -> Result<SequenceReport> {
    if seq.is_empty() {
        return Err(Error::invalid("sequence", "empty"));
    }
    if times.len() != seq.len() {
        return Err(Error::shape(format!("{} times", seq.len()), times.len()));
    }
    let rows = seq
        .iter()
        .zip(times)
        .enumerate()
        .map(|(step, (img, &t))| {
            Ok(SequenceRow {
                step,
                t,
                psnr_db: psnr(img, reference)?,
                ssim: ssim(img, reference, p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> Image {
        Image::filled(12, 12, 1, v).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr(&constant(0.3), &constant(0.3)).unwrap(), PSNR_CAP);
        assert!(psnr(&constant(0.0), &constant(1.0)).unwrap().abs() < 1e-12);
        // MSE = 0.01
        let p = psnr(&constant(0.2), &constant(0.3)).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn ssim_closed_forms() {
        let p = SsimParams::default();
        assert!((ssim(&constant(0.4), &constant(0.4), &p).unwrap() - 1.0).abs() < 1e-12);
        let expected = p.c1 / (1.0 + p.c1);
        let got = ssim(&constant(0.0), &constant(1.0), &p).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::filled(8, 20, 1, 0.5).unwrap();
        assert!(ssim(&a, &a, &SsimParams::default()).is_err());
        let even = SsimParams {
            window: 4,
            ..SsimParams::default()
        };
        let b = constant(0.5);
        assert!(ssim(&b, &b, &even).is_err());
    }

    #[test]
    fn gaussian_taps_are_normalized_and_symmetric() {
        let taps = SsimParams::default().gaussian_taps();
        assert_eq!(taps.len(), 11);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(taps[0], taps[10]);
    }

    #[test]
    fn sequence_report_csv_and_argmax() {
        let reference = constant(0.5);
        let seq: Vec<Image> = [0.1, 0.3, 0.5, 0.45]
            .iter()
            .map(|&v| constant(v))
            .collect();
        let report = sequence_metrics(&seq, &[0.0, 0.5, 1.0, 1.5], &reference, &SsimParams::default()).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.argmax_psnr(), 2);
        assert_eq!(report.rows[2].psnr_db, PSNR_CAP);
        let csv = report.to_csv();
        assert!(csv.starts_with("step,t,psnr_db,ssim\n0,0,"));
        assert_eq!(csv.lines().count(), 5);

        let single = sequence_metrics(&seq[..1], &[0.0], &reference, &SsimParams::default()).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert!(sequence_metrics(&seq, &[0.0], &reference, &SsimParams::default()).is_err());
    }
}
