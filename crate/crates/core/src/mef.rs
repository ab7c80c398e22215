//! Multi-exposure fusion with well-exposedness weights and Laplacian pyramid
//! blending.

use crate::error::{Error, Result};
use crate::imagecore::Image;

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub sigma_e: f64,
    pub pyramid_levels: usize,
    pub weight_floor: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            sigma_e: 0.2,
            pyramid_levels: 4,
            weight_floor: 1e-6,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_e.is_nan() || self.sigma_e <= 0.0 {
            return Err(Error::invalid("sigma_e", format!("{} (must be > 0)", self.sigma_e)));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::invalid("pyramid_levels", "must be >= 1"));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor.is_finite()) {
            return Err(Error::invalid("weight_floor", format!("{} (must be > 0)", self.weight_floor)));
        }
        Ok(())
    }
}

/// Per-pixel `prod_c exp(-(v_c - 0.5)^2 / (2 sigma_e^2))`, row-major `H x W`.
pub fn well_exposedness(img: &Image, sigma_e: f64) -> Vec<f64> {
    let denom = 2.0 * sigma_e * sigma_e;
    img.data()
        .chunks_exact(img.channels())
        .map(|px| px.iter().map(|v| (-(v - 0.5) * (v - 0.5) / denom).exp()).product())
        .collect()
}

pub fn mean_well_exposedness(img: &Image, sigma_e: f64) -> f64 {
    let w = well_exposedness(img, sigma_e);
    w.iter().sum::<f64>() / w.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    /// Separable binomial blur with replicated borders.
    fn blur(&self) -> Plane {
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                tmp[y * self.w + x] = BINOMIAL
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * self.at(y as isize, x as isize + k as isize - 2))
                    .sum();
            }
        }
        let rows = Plane {
            h: self.h,
            w: self.w,
            data: tmp,
        };
        let mut out = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                out[y * self.w + x] = BINOMIAL
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * rows.at(y as isize + k as isize - 2, x as isize))
                    .sum();
            }
        }
        Plane {
            h: self.h,
            w: self.w,
            data: out,
        }
    }

    fn down(&self) -> Plane {
        let b = self.blur();
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(b.data[2 * y * self.w + 2 * x]);
            }
        }
        Plane { h, w, data }
    }

    fn up(&self, h: usize, w: usize) -> Plane {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.data[(y / 2) * self.w + x / 2]);
            }
        }
        Plane { h, w, data }.blur()
    }
}

fn gaussian_pyramid(base: Plane, levels: usize) -> Vec<Plane> {
    let mut pyr = vec![base];
    while pyr.len() < levels {
        let next = pyr.last().expect("non-empty").down();
        pyr.push(next);
    }
    pyr
}

fn laplacian_pyramid(base: Plane, levels: usize) -> Vec<Plane> {
    let g = gaussian_pyramid(base, levels);
    let mut lap = Vec::with_capacity(levels);
    for k in 0..levels - 1 {
        let up = g[k + 1].up(g[k].h, g[k].w);
        lap.push(Plane {
            h: g[k].h,
            w: g[k].w,
            data: g[k].data.iter().zip(&up.data).map(|(a, b)| a - b).collect(),
        });
    }
    lap.push(g[levels - 1].clone());
    lap
}

fn collapse(mut lap: Vec<Plane>) -> Plane {
    let mut acc = lap.pop().expect("non-empty pyramid");
    while let Some(level) = lap.pop() {
        let up = acc.up(level.h, level.w);
        acc = Plane {
            h: level.h,
            w: level.w,
            data: level.data.iter().zip(&up.data).map(|(a, b)| a + b).collect(),
        };
    }
    acc
}

/// Per-pixel weights of every input, normalized to sum to one.
pub fn normalized_weights(seq: &[Image], p: &FusionParams) -> Vec<Vec<f64>> {
    let mut weights: Vec<Vec<f64>> = seq
        .iter()
        .map(|img| {
            well_exposedness(img, p.sigma_e)
                .into_iter()
                .map(|w| w + p.weight_floor)
                .collect()
        })
        .collect();
    for q in 0..weights[0].len() {
        let total: f64 = weights.iter().map(|w| w[q]).sum();
        for w in &mut weights {
            w[q] /= total;
        }
    }
    weights
}

pub fn fuse(seq: &[Image], p: &FusionParams) -> Result<Image> {
    p.validate()?;
    let first = seq.first().ok_or_else(|| Error::invalid("sequence", "empty"))?;
    for img in &seq[1..] {
        first.expect_congruent(img)?;
    }
    if seq.len() == 1 {
        return Ok(first.clone());
    }
    let (h, w, ch) = (first.height(), first.width(), first.channels());
    let max_levels = (usize::BITS - h.min(w).leading_zeros()) as usize;
    let levels = p.pyramid_levels.min(max_levels);
    let weights = normalized_weights(seq, p);
    let weight_pyrs: Vec<Vec<Plane>> = weights
        .into_iter()
        .map(|data| gaussian_pyramid(Plane { h, w, data }, levels))
        .collect();

    let mut out = vec![0.0; h * w * ch];
    for c in 0..ch {
        let mut blended: Option<Vec<Plane>> = None;
        for (img, wp) in seq.iter().zip(&weight_pyrs) {
            let plane = Plane {
                h,
                w,
                data: img.data().iter().skip(c).step_by(ch).copied().collect(),
            };
            let lap = laplacian_pyramid(plane, levels);
            let acc = blended.get_or_insert_with(|| {
                lap.iter()
                    .map(|l| Plane {
                        h: l.h,
                        w: l.w,
                        data: vec![0.0; l.data.len()],
                    })
                    .collect()
            });
            for ((a, l), wl) in acc.iter_mut().zip(&lap).zip(wp) {
                for ((dst, lv), wv) in a.data.iter_mut().zip(&l.data).zip(&wl.data) {
                    *dst += lv * wv;
                }
            }
        }
        let plane = collapse(blended.expect("at least two inputs"));
        for (q, v) in plane.data.into_iter().enumerate() {
            out[q * ch + c] = v;
        }
    }
    Image::from_clamped(h, w, ch, out)
}
