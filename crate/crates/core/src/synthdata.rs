//! Paired low/normal-light scenes with known Retinex factors.
//!
//! A scene is a smooth illumination field (a few Gaussian bumps rescaled to
//! `[0.1, 1.0]`) times piecewise-constant Voronoi reflectance. Exposures
//! follow `I = f(E * delta)` with a camera response `f`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::imagecore::{load_image, recompose, save_image, IlluminationMap, Image, ReflectanceMap};

pub const MIN_SCENE_SIZE: usize = 8;
pub const ILLUMINATION_RANGE: (f64, f64) = (0.1, 1.0);
pub const REFLECTANCE_RANGE: (f64, f64) = (0.05, 1.0);
pub const MANIFEST_FILE: &str = "manifest.txt";

const NOISE_SEED_SALT: u64 = 0x05ee_d0fa_015e;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResponseCurve {
    Identity,
    /// `f(x) = x^(1/gamma)`.
    Gamma(f64),
}

impl ResponseCurve {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            ResponseCurve::Identity => x,
            ResponseCurve::Gamma(g) => x.max(0.0).powf(1.0 / g),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureSpec {
    pub delta: f64,
    pub response: ResponseCurve,
}

impl ExposureSpec {
    pub fn new(delta: f64, response: ResponseCurve) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::invalid("delta", format!("{delta} (must be > 0)")));
        }
        if let ResponseCurve::Gamma(g) = response {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::invalid("gamma", format!("{g} (must be > 0)")));
            }
        }
        Ok(Self { delta, response })
    }

    pub fn linear(delta: f64) -> Result<Self> {
        Self::new(delta, ResponseCurve::Identity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    pub gaussian_sigma: f64,
    pub speckle_sigma: f64,
    pub chroma_shift: f64,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            gaussian_sigma: sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gaussian_sigma", self.gaussian_sigma),
            ("speckle_sigma", self.speckle_sigma),
            ("chroma_shift", self.chroma_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("noise spec", format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub height: usize,
    pub width: usize,
    /// `H x W x 3`, interleaved; equals illumination times reflectance.
    pub irradiance: Vec<f64>,
    pub true_reflectance: ReflectanceMap,
    pub true_illumination: IlluminationMap,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub low: Image,
    pub normal: Image,
    pub low_illum: IlluminationMap,
    pub normal_illum: IlluminationMap,
    pub low_refl: ReflectanceMap,
    pub normal_refl: ReflectanceMap,
}

pub fn render_scene(seed: u64, size: (usize, usize)) -> Result<GroundTruthScene> {
    let (h, w) = size;
    if h < MIN_SCENE_SIZE || w < MIN_SCENE_SIZE {
        return Err(Error::invalid(
            "scene size",
            format!("{h}x{w} (minimum {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE})"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = h.min(w) as f64;

    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=4))
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let sigma = rng.random_range(0.25..0.6) * side;
            let amp = rng.random_range(0.4..1.0);
            (cy, cx, sigma, amp)
        })
        .collect();
    let mut field = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            field[y * w + x] = bumps
                .iter()
                .map(|&(cy, cx, s, a)| {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum();
        }
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let (min_l, max_l) = ILLUMINATION_RANGE;
    let illum: Vec<f64> = if hi - lo > 1e-12 {
        field
            .iter()
            .map(|v| (min_l + (max_l - min_l) * (v - lo) / (hi - lo)).clamp(min_l, max_l))
            .collect()
    } else {
        vec![max_l; h * w]
    };

    let sites: Vec<(f64, f64, [f64; 3])> = (0..rng.random_range(4..=8))
        .map(|_| {
            let sy = rng.random_range(0.0..h as f64);
            let sx = rng.random_range(0.0..w as f64);
            let color = [(); 3].map(|_| rng.random_range(REFLECTANCE_RANGE.0..=REFLECTANCE_RANGE.1));
            (sy, sx, color)
        })
        .collect();
    let mut refl = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let nearest = sites
                .iter()
                .min_by(|a, b| {
                    let da = (y as f64 - a.0).powi(2) + (x as f64 - a.1).powi(2);
                    let db = (y as f64 - b.0).powi(2) + (x as f64 - b.1).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one site");
            refl.extend_from_slice(&nearest.2);
        }
    }

    let irradiance = refl
        .chunks_exact(3)
        .zip(&illum)
        .flat_map(|(px, &l)| px.iter().map(move |&r| l * r))
        .collect();

    Ok(GroundTruthScene {
        height: h,
        width: w,
        irradiance,
        true_reflectance: ReflectanceMap::new(Image::new(h, w, 3, refl)?)?,
        true_illumination: IlluminationMap::new(Image::new(h, w, 1, illum)?)?,
        seed,
    })
}

/// `clamp01(f(E * delta))`.
pub fn expose(scene: &GroundTruthScene, spec: &ExposureSpec) -> Result<Image> {
    let data = scene
        .irradiance
        .iter()
        .map(|&e| spec.response.apply(e * spec.delta).clamp(0.0, 1.0))
        .collect();
    Image::new(scene.height, scene.width, 3, data)
}

/// `clamp01(R * (1 + speckle) + gaussian + chroma_bias)`.
///
/// Speckle is drawn once per pixel, Gaussian noise once per sample, and the
/// chroma bias once per channel for the whole map.
pub fn inject_noise(r: &ReflectanceMap, spec: &NoiseSpec, seed: u64) -> Result<ReflectanceMap> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.chroma_shift;
    let bias: [f64; 3] = [(); 3].map(|_| rng.random_range(-c..=c));
    let mut data = Vec::with_capacity(r.data().len());
    for px in r.data().chunks_exact(3) {
        let speckle: f64 = rng.sample::<f64, _>(StandardNormal) * spec.speckle_sigma;
        for (ch, &v) in px.iter().enumerate() {
            let gauss: f64 = rng.sample::<f64, _>(StandardNormal) * spec.gaussian_sigma;
            data.push((v * (1.0 + speckle) + gauss + bias[ch]).clamp(0.0, 1.0));
        }
    }
    ReflectanceMap::new(Image::new(r.height(), r.width(), 3, data)?)
}

pub fn make_pair(
    scene: &GroundTruthScene,
    low_delta: f64,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<TrainingPair> {
    if !(low_delta > 0.0 && low_delta <= 1.0) {
        return Err(Error::invalid("low_delta", format!("{low_delta} (must be in (0, 1])")));
    }
    let normal = expose(scene, &ExposureSpec::linear(1.0)?)?;
    let normal_illum = scene.true_illumination.clone();
    let low_illum = IlluminationMap::new(Image::new(
        scene.height,
        scene.width,
        1,
        normal_illum.data().iter().map(|v| low_delta * v).collect(),
    )?)?;
    let low_refl = inject_noise(&scene.true_reflectance, noise, seed)?;
    let low = recompose(&low_illum, &low_refl)?;
    Ok(TrainingPair {
        low,
        normal,
        low_illum,
        normal_illum,
        low_refl,
        normal_refl: scene.true_reflectance.clone(),
    })
}

/// Seed used for the noise of the pair generated from scene `seed`.
pub fn noise_seed(seed: u64) -> u64 {
    seed ^ NOISE_SEED_SALT
}

/// Generation parameters recorded next to each pair on disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairManifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub low_delta: f64,
    pub noise: NoiseSpec,
}

impl PairManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let n = &self.noise;
        for (k, v) in [
            ("seed", self.seed.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("low_delta", self.low_delta.to_string()),
            ("gaussian_sigma", n.gaussian_sigma.to_string()),
            ("speckle_sigma", n.speckle_sigma.to_string()),
            ("chroma_shift", n.chroma_shift.to_string()),
        ] {
            writeln!(s, "{k}={v}").expect("write to String");
        }
        s
    }
}

/// Renders scene `manifest.seed` and writes its pair under `dir`.
pub fn write_pair_dir(dir: &Path, manifest: &PairManifest) -> Result<TrainingPair> {
    let scene = render_scene(manifest.seed, (manifest.height, manifest.width))?;
    let pair = make_pair(&scene, manifest.low_delta, &manifest.noise, noise_seed(manifest.seed))?;
    fs::create_dir_all(dir).map_err(|e| Error::Write {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    save_image(&pair.low, dir.join("low.png"))?;
    save_image(&pair.normal, dir.join("normal.png"))?;
    save_image(pair.low_illum.image(), dir.join("low_L.png"))?;
    save_image(pair.normal_illum.image(), dir.join("normal_L.png"))?;
    save_image(pair.low_refl.image(), dir.join("low_R.png"))?;
    save_image(pair.normal_refl.image(), dir.join("normal_R.png"))?;
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text()).map_err(|e| Error::Write {
        path: dir.join(MANIFEST_FILE),
        reason: e.to_string(),
    })?;
    Ok(pair)
}

/// Loads a pair written by [`write_pair_dir`].
pub fn read_pair_dir(dir: &Path) -> Result<TrainingPair> {
    Ok(TrainingPair {
        low: load_image(dir.join("low.png"))?,
        normal: load_image(dir.join("normal.png"))?,
        low_illum: IlluminationMap::new(load_image(dir.join("low_L.png"))?)?,
        normal_illum: IlluminationMap::new(load_image(dir.join("normal_L.png"))?)?,
        low_refl: ReflectanceMap::new(load_image(dir.join("low_R.png"))?)?,
        normal_refl: ReflectanceMap::new(load_image(dir.join("normal_R.png"))?)?,
    })
}

/// Every pair directory directly under `root`, in lexicographic order.
pub fn read_pairs_root(root: &Path) -> Result<Vec<TrainingPair>> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(
            "pairs",
            format!("no pair directories under {}", root.display()),
        ));
    }
    dirs.iter().map(|d| read_pair_dir(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic_and_in_range() {
        let a = render_scene(3, (32, 24)).unwrap();
        assert_eq!(a, render_scene(3, (32, 24)).unwrap());
        assert_ne!(a, render_scene(4, (32, 24)).unwrap());
        let l = a.true_illumination.data();
        let (lo, hi) = l.iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(lo >= 0.1 - 1e-12 && hi <= 1.0);
        assert!((lo - 0.1).abs() < 1e-9 && (hi - 1.0).abs() < 1e-9);
        assert!(a.true_reflectance.data().iter().all(|&r| (0.05..=1.0).contains(&r)));
    }

    #[test]
    fn irradiance_is_illumination_times_reflectance() {
        let s = render_scene(11, (16, 16)).unwrap();
        for (i, px) in s.true_reflectance.data().chunks_exact(3).enumerate() {
            for (c, r) in px.iter().enumerate() {
                let want = s.true_illumination.data()[i] * r;
                assert!((s.irradiance[i * 3 + c] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scene_too_small() {
        assert!(render_scene(0, (7, 32)).is_err());
    }

    #[test]
    fn exposure_examples() {
        let s = render_scene(1, (16, 16)).unwrap();
        let base = expose(&s, &ExposureSpec::linear(1.0).unwrap()).unwrap();
        assert_eq!(base.data(), s.irradiance.as_slice());
        let half = expose(&s, &ExposureSpec::linear(0.5).unwrap()).unwrap();
        for (h, b) in half.data().iter().zip(base.data()) {
            assert_eq!(*h, 0.5 * b);
        }
        let f = ResponseCurve::Gamma(2.2);
        assert!((f.apply(0.5) - 0.729_740_2).abs() < 1e-6);
        assert!(ExposureSpec::linear(0.0).is_err());
        assert!(ExposureSpec::new(1.0, ResponseCurve::Gamma(-1.0)).is_err());
    }

    #[test]
    fn zero_noise_is_identity_and_seeded() {
        let s = render_scene(2, (16, 16)).unwrap();
        let r = &s.true_reflectance;
        assert_eq!(&inject_noise(r, &NoiseSpec::default(), 5).unwrap(), r);
        let spec = NoiseSpec {
            gaussian_sigma: 0.05,
            speckle_sigma: 0.1,
            chroma_shift: 0.02,
        };
        assert_eq!(inject_noise(r, &spec, 9).unwrap(), inject_noise(r, &spec, 9).unwrap());
        assert_ne!(inject_noise(r, &spec, 9).unwrap(), inject_noise(r, &spec, 10).unwrap());
        assert!(inject_noise(r, &NoiseSpec::gaussian(-0.1), 0).is_err());
    }

    #[test]
    fn pair_algebra() {
        let s = render_scene(6, (16, 16)).unwrap();
        let same = make_pair(&s, 1.0, &NoiseSpec::default(), 0).unwrap();
        for (a, b) in same.low.data().iter().zip(same.normal.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let p = make_pair(&s, 0.25, &NoiseSpec::gaussian(0.1), 0).unwrap();
        for (lo, n) in p.low_illum.data().iter().zip(p.normal_illum.data()) {
            assert_eq!(*lo, 0.25 * n);
            assert!(((n - lo) - 0.75 * n).abs() < 1e-15);
        }
        let back = recompose(&p.normal_illum, &p.normal_refl).unwrap();
        for (a, b) in back.data().iter().zip(p.normal.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(make_pair(&s, 1.5, &NoiseSpec::default(), 0).is_err());
        assert!(make_pair(&s, 0.0, &NoiseSpec::default(), 0).is_err());
    }

    #[test]
    fn manifest_lines() {
        let m = PairManifest {
            seed: 7,
            height: 16,
            width: 20,
            low_delta: 0.25,
            noise: NoiseSpec::gaussian(0.1),
        };
        let text = m.to_text();
        assert!(text.starts_with("seed=7\nheight=16\nwidth=20\nlow_delta=0.25\ngaussian_sigma=0.1\n"));
    }
}
