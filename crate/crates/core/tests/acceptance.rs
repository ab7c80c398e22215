//! Acceptance suite. Runs every criterion, prints one `pass`/`fail` line per
//! criterion, and exits non-zero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retiflow::autodiff::{Network, NetworkSpec, Tensor};
use retiflow::crfi::{
    interpolate, offset_toy_pairs, target_velocity, train_crfi, CrfiTrainConfig, DatasetSampler,
};
use retiflow::crfr::{denoise, synthetic_pairs, train_crfr, ReflectanceSampler};
use retiflow::imagecore::{recompose, IlluminationMap, Image};
use retiflow::integrator::{enhance_onestep, integrate, TrajectoryConfig};
use retiflow::mef::{fuse, mean_well_exposedness, FusionParams};
use retiflow::metrics::{psnr, sequence_metrics, ssim, SsimParams};
use retiflow::retinex::{decompose, DecompParams};
use retiflow::selftest::{gradcheck_suite, toy_flow_config, toy_probe_error, GRADCHECK_TOLERANCE};
use retiflow::synthdata::{expose, make_pair, render_scene, ExposureSpec, NoiseSpec, TrainingPair};

type Outcome = retiflow::Result<(bool, String)>;

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> IlluminationMap {
    let data = (0..h * w).map(|_| rng.random_range(lo..=hi)).collect();
    IlluminationMap::new(Image::new(h, w, 1, data).unwrap()).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let suite = gradcheck_suite(0)?;
    let elapsed = start.elapsed();
    let (worst_name, worst) = suite
        .iter()
        .map(|(n, r)| (n.as_str(), r.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let ok = worst < GRADCHECK_TOLERANCE && elapsed < Duration::from_secs(60);
    Ok((ok, format!("checks={} max_rel_error={worst:.2e} ({worst_name}) elapsed={elapsed:.2?}", suite.len())))
}

fn interpolation_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = random_map(&mut rng, 4, 4, 0.0, 1.0);
        let y = random_map(&mut rng, 4, 4, 0.0, 1.0);
        let t = rng.random_range(0.0..=1.0);
        worst = worst.max(max_diff(interpolate(&x, &y, 0.0)?.data(), x.data()));
        worst = worst.max(max_diff(interpolate(&x, &y, 1.0)?.data(), y.data()));
        let mid: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| 0.5 * (a + b)).collect();
        worst = worst.max(max_diff(interpolate(&x, &y, 0.5)?.data(), &mid));
        let phi = interpolate(&x, &y, t)?;
        let v = target_velocity(&x, &y)?;
        let back: Vec<f64> = phi.data().iter().zip(v.data()).map(|(p, v)| p + (1.0 - t) * v).collect();
        worst = worst.max(max_diff(&back, y.data()));
    }
    Ok((worst < 1e-6, format!("samples=1000 max_err={worst:.2e}")))
}

fn euler_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = Tensor::new(vec![1, 6, 5], (0..30).map(|_| rng.random_range(-0.3..=0.3)).collect())?;
    let field = |z: &Tensor, _: f64, _: f64| {
        z.expect_shape(c.shape())?;
        Ok(c.clone())
    };
    let l0 = random_map(&mut rng, 6, 5, 0.35, 0.65);
    let mut worst: f64 = 0.0;
    for n in [1, 7, 50] {
        let fwd = TrajectoryConfig { t_start: 0.0, t_end: 1.0, steps: n };
        let seq = integrate(&field, &l0, &fwd)?;
        let expected: Vec<f64> = l0.data().iter().zip(c.data()).map(|(l, v)| l + v).collect();
        worst = worst.max(max_diff(seq.states[n].data(), &expected));
        let end = IlluminationMap::new(Image::new(6, 5, 1, seq.states[n].data().to_vec())?)?;
        let back = integrate(&field, &end, &TrajectoryConfig { t_start: 1.0, t_end: 0.0, steps: n })?;
        worst = worst.max(max_diff(back.states[n].data(), l0.data()));
    }
    Ok((worst < 1e-9, format!("steps=1,7,50 max_err={worst:.2e}")))
}

/// Trains the constant-offset toy flow once; shared by two criteria.
fn toy_checkpoint() -> retiflow::Result<(Network, Duration)> {
    let pairs = offset_toy_pairs(256, 4, 0.5, 1)?;
    let mut sampler = DatasetSampler::new(pairs, 2)?;
    let start = Instant::now();
    let out = train_crfi(&mut sampler, &toy_flow_config(3, 2000))?;
    Ok((out.net, start.elapsed()))
}

fn oracle_flow_recovery(net: &Network, elapsed: Duration) -> Outcome {
    let worst = toy_probe_error(net)?;
    let ok = worst < 0.05 && elapsed < Duration::from_secs(300);
    Ok((ok, format!("iterations=2000 max_probe_error={worst:.4} elapsed={elapsed:.2?}")))
}

fn one_step_property(net: &Network) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut inputs: Vec<IlluminationMap> = (0..=10)
        .map(|k| IlluminationMap::filled(4, 4, 0.05 * k as f64).unwrap())
        .collect();
    inputs.extend((0..10).map(|_| random_map(&mut rng, 4, 4, 0.0, 0.5)));
    let fifty = TrajectoryConfig { t_start: 0.0, t_end: 1.0, steps: 50 };
    let mut worst: f64 = 0.0;
    for x in &inputs {
        let one = enhance_onestep(net, x)?;
        let many = integrate(net, x, &fifty)?;
        worst = worst.max(max_diff(one.data(), many.last().data()));
    }
    Ok((worst < 0.05, format!("inputs={} max_diff={worst:.4}", inputs.len())))
}

fn denoiser_gain() -> Outcome {
    let noise = NoiseSpec::gaussian(0.1);
    let train = synthetic_pairs(32, (64, 64), &noise, 1000)?;
    let test = synthetic_pairs(8, (64, 64), &noise, 5000)?;
    let cfg = CrfiTrainConfig {
        batch_size: 8,
        iterations: 1000,
        lr: 3e-3,
        d_levels: 6,
        seed: 3,
        patch_size: 24,
        network: NetworkSpec { in_channels: 3, hidden_channels: 12, depth: 2, embed_dim: 8 },
    };
    let start = Instant::now();
    let net = train_crfr(&mut ReflectanceSampler::new(&train, 7)?, &cfg)?.net;
    let elapsed = start.elapsed();
    let (mut before, mut after) = (0.0, 0.0);
    for p in &test {
        before += psnr(p.noisy.image(), p.clean.image())?;
        after += psnr(denoise(&net, &p.noisy)?.image(), p.clean.image())?;
    }
    let gain = (after - before) / test.len() as f64;
    let ok = gain >= 5.0 && elapsed < Duration::from_secs(600);
    Ok((ok, format!("held_out={} gain_db={gain:.2} elapsed={elapsed:.2?}", test.len())))
}

fn decomposition_descent() -> Outcome {
    let mut all_monotone = true;
    let mut worst_rmse: f64 = 0.0;
    for seed in 0..20 {
        let img = expose(&render_scene(seed, (64, 64))?, &ExposureSpec::linear(1.0)?)?;
        let res = decompose(&img, &DecompParams::default())?;
        all_monotone &= res.objective_trace.windows(2).all(|w| w[1] <= w[0]);
        let back = recompose(&res.l, &res.r)?;
        let mse = back.data().iter().zip(img.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            / img.data().len() as f64;
        worst_rmse = worst_rmse.max(mse.sqrt());
    }
    let ok = all_monotone && worst_rmse < 1e-2;
    Ok((ok, format!("scenes=20 monotone={all_monotone} max_rmse={worst_rmse:.5}")))
}

fn brute_psnr(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    -10.0 * mse.log10()
}

/// Direct per-window SSIM with a 2-D Gaussian, no separable filtering.
fn brute_ssim(a: &Image, b: &Image) -> f64 {
    let (win, sigma, c1, c2) = (11usize, 1.5f64, 1e-4, 9e-4);
    let r = (win / 2) as f64;
    let mut w = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let (di, dj) = (i as f64 - r, j as f64 - r);
            w[i * win + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    let (h, wd, ch) = (a.height(), a.width(), a.channels());
    let (mut total, mut count) = (0.0, 0usize);
    for c in 0..ch {
        for y0 in 0..=h - win {
            for x0 in 0..=wd - win {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let k = w[i * win + j];
                        let (p, q) = (a.get(y0 + i, x0 + j, c), b.get(y0 + i, x0 + j, c));
                        ma += k * p;
                        mb += k * q;
                        saa += k * p * p;
                        sbb += k * q * q;
                        sab += k * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = SsimParams::default();
    let (mut dp, mut ds): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let a = random_image(&mut rng, 16, 16, 3);
        let b = random_image(&mut rng, 16, 16, 3);
        dp = dp.max((psnr(&a, &b)? - brute_psnr(&a, &b)).abs());
        ds = ds.max((ssim(&a, &b, &p)? - brute_ssim(&a, &b)).abs());
    }
    let mut dc: f64 = 0.0;
    for (u, v) in [(0.2, 0.7), (0.5, 0.5), (0.0, 1.0), (0.9, 0.1)] {
        let a = Image::filled(16, 16, 3, u)?;
        let b = Image::filled(16, 16, 3, v)?;
        let closed = (2.0 * u * v + 1e-4) / (u * u + v * v + 1e-4);
        dc = dc.max((ssim(&a, &b, &p)? - closed).abs());
    }
    let ok = dp < 1e-9 && ds < 1e-9 && dc < 1e-9;
    Ok((ok, format!("images=50 psnr_err={dp:.1e} ssim_err={ds:.1e} constant_err={dc:.1e}")))
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn exposure_linearity() -> Outcome {
    let deltas: Vec<f64> = (1..=20).map(|k| 0.15 * k as f64).collect();
    let mut worst = f64::INFINITY;
    let mut series = 0usize;
    for seed in 0..3 {
        let scene = render_scene(seed, (32, 32))?;
        let sweep = deltas
            .iter()
            .map(|&d| expose(&scene, &ExposureSpec::linear(d)?))
            .collect::<retiflow::Result<Vec<_>>>()?;
        for q in 0..sweep[0].data().len() {
            let (xs, ys): (Vec<f64>, Vec<f64>) = deltas
                .iter()
                .zip(&sweep)
                .map(|(&d, img)| (d, img.data()[q]))
                .filter(|&(_, v)| v < 1.0)
                .unzip();
            if xs.len() >= 3 {
                worst = worst.min(pearson(&xs, &ys));
                series += 1;
            }
        }
    }
    Ok((worst > 0.999, format!("series={series} min_pearson_r={worst:.9}")))
}

fn synthetic_pairs_clean(seeds: std::ops::Range<u64>) -> retiflow::Result<Vec<TrainingPair>> {
    seeds
        .map(|s| make_pair(&render_scene(s, (64, 64))?, 0.25, &NoiseSpec::default(), s))
        .collect()
}

/// Illumination flow trained on clean synthetic low/normal pairs; shared by
/// the sequence-shape and fusion criteria.
fn scene_flow() -> retiflow::Result<Network> {
    let pairs = synthetic_pairs_clean(0..32)?;
    let cfg = CrfiTrainConfig {
        batch_size: 8,
        iterations: 600,
        lr: 3e-3,
        d_levels: 6,
        seed: 1,
        patch_size: 16,
        network: NetworkSpec { in_channels: 1, hidden_channels: 8, depth: 2, embed_dim: 8 },
    };
    Ok(train_crfi(&mut DatasetSampler::from_training_pairs(&pairs, 5)?, &cfg)?.net)
}

fn frames_for(net: &Network, p: &TrainingPair, traj: &TrajectoryConfig) -> retiflow::Result<(Vec<Image>, Vec<f64>)> {
    let seq = integrate(net, &p.low_illum, traj)?;
    let frames = seq
        .levels
        .iter()
        .map(|l| recompose(l, &p.low_refl))
        .collect::<retiflow::Result<_>>()?;
    Ok((frames, seq.times))
}

fn sequence_shape(net: &Network, held_out: &[TrainingPair]) -> Outcome {
    let traj = TrajectoryConfig { t_start: 0.0, t_end: 1.2, steps: 12 };
    let mut peaks = Vec::new();
    for p in held_out {
        let (frames, times) = frames_for(net, p, &traj)?;
        let report = sequence_metrics(&frames, &times, &p.normal, &SsimParams::default())?;
        peaks.push(report.rows[report.argmax_psnr()].t);
    }
    let ok = peaks.iter().all(|t| (0.8 - 1e-9..=1.2 + 1e-9).contains(t));
    let list: Vec<String> = peaks.iter().map(|t| format!("{t:.2}")).collect();
    Ok((ok, format!("scenes={} argmax_t=[{}]", held_out.len(), list.join(","))))
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn sequence_cost() -> Outcome {
    let net = Network::with_random_head(
        NetworkSpec { in_channels: 1, hidden_channels: 8, depth: 2, embed_dim: 8 },
        21,
    )?;
    let l0 = random_map(&mut ChaCha8Rng::seed_from_u64(15), 128, 128, 0.05, 0.4);
    let fifty = TrajectoryConfig { t_start: 0.0, t_end: 1.0, steps: 50 };
    enhance_onestep(&net, &l0)?;
    let mut one = Vec::new();
    for _ in 0..9 {
        let s = Instant::now();
        enhance_onestep(&net, &l0)?;
        one.push(s.elapsed());
    }
    let mut many = Vec::new();
    for _ in 0..3 {
        let s = Instant::now();
        integrate(&net, &l0, &fifty)?;
        many.push(s.elapsed());
    }
    let (one, many) = (median(one), median(many));
    let ratio = many.as_secs_f64() / (50.0 * one.as_secs_f64());
    let ok = (0.5..=2.0).contains(&ratio);
    Ok((ok, format!("one_step={one:.2?} fifty_steps={many:.2?} ratio={ratio:.3}")))
}

fn fusion_sanity(net: &Network, held_out: &[TrainingPair]) -> Outcome {
    let traj = TrajectoryConfig { t_start: 0.0, t_end: 2.0, steps: 20 };
    let sigma = FusionParams::default().sigma_e;
    let mut ok = true;
    let mut margins = Vec::new();
    for p in held_out {
        let (frames, _) = frames_for(net, p, &traj)?;
        let fused = mean_well_exposedness(&fuse(&frames, &FusionParams::default())?, sigma);
        let best = frames.iter().map(|f| mean_well_exposedness(f, sigma)).fold(0.0, f64::max);
        ok &= fused >= best;
        margins.push(format!("{:+.4}", fused - best));
    }
    Ok((ok, format!("scenes={} fused_minus_best_input=[{}]", held_out.len(), margins.join(","))))
}

fn report(name: &str, outcome: Outcome, failures: &mut usize) {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    if !passed {
        *failures += 1;
    }
    println!("{} {name} {detail}", if passed { "pass" } else { "fail" });
}

fn main() {
    let mut failures = 0;
    report("gradient_correctness", gradient_correctness(), &mut failures);
    report("interpolation_identities", interpolation_identities(), &mut failures);
    report("euler_exactness", euler_exactness(), &mut failures);
    match toy_checkpoint() {
        Ok((net, elapsed)) => {
            report("oracle_flow_recovery", oracle_flow_recovery(&net, elapsed), &mut failures);
            report("one_step_property", one_step_property(&net), &mut failures);
        }
        Err(e) => {
            for name in ["oracle_flow_recovery", "one_step_property"] {
                report(name, Ok((false, format!("error: {e}"))), &mut failures);
            }
        }
    }
    report("denoiser_gain", denoiser_gain(), &mut failures);
    report("decomposition_descent", decomposition_descent(), &mut failures);
    report("metric_oracles", metric_oracles(), &mut failures);
    report("exposure_linearity", exposure_linearity(), &mut failures);
    report("sequence_cost", sequence_cost(), &mut failures);
    let held_out = synthetic_pairs_clean(100..104);
    match (scene_flow(), held_out) {
        (Ok(net), Ok(held_out)) => {
            report("sequence_shape", sequence_shape(&net, &held_out), &mut failures);
            report("fusion_sanity", fusion_sanity(&net, &held_out), &mut failures);
        }
        (Err(e), _) | (_, Err(e)) => {
            for name in ["sequence_shape", "fusion_sanity"] {
                report(name, Ok((false, format!("error: {e}"))), &mut failures);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", 12 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
