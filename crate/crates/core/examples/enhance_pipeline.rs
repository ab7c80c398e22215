//! Full enhancement: decompose, denoise reflectance, move illumination, and
//! recompose. Compares the one-step output with a 10-step trajectory.
//!
//! cargo run --release --example enhance_pipeline -- [OUT_DIR]

use std::path::PathBuf;

use retiflow::autodiff::NetworkSpec;
use retiflow::crfi::{train_crfi, CrfiTrainConfig, DatasetSampler};
use retiflow::crfr::{train_crfr, ReflectanceSampler};
use retiflow::imagecore::save_image;
use retiflow::integrator::{enhance_image, TrajectoryConfig};
use retiflow::metrics::{psnr, ssim, SsimParams};
use retiflow::retinex::DecompParams;
use retiflow::synthdata::{make_pair, render_scene, NoiseSpec};

fn main() -> retiflow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("retiflow-enhance"));
    std::fs::create_dir_all(&out)?;

    let noise = NoiseSpec::gaussian(0.05);
    let pairs = (0..24)
        .map(|s| make_pair(&render_scene(s, (48, 48))?, 0.25, &noise, s))
        .collect::<retiflow::Result<Vec<_>>>()?;
    let base = CrfiTrainConfig { lr: 3e-3, patch_size: 16, ..CrfiTrainConfig::default() };
    let crfi = train_crfi(
        &mut DatasetSampler::from_training_pairs(&pairs, 1)?,
        &CrfiTrainConfig {
            iterations: 400,
            network: NetworkSpec { in_channels: 1, hidden_channels: 8, depth: 2, embed_dim: 8 },
            ..base
        },
    )?
    .net;
    let crfr = train_crfr(
        &mut ReflectanceSampler::from_training_pairs(&pairs, 2)?,
        &CrfiTrainConfig {
            iterations: 300,
            network: NetworkSpec { in_channels: 3, hidden_channels: 8, depth: 2, embed_dim: 8 },
            ..base
        },
    )?
    .net;

    let test = make_pair(&render_scene(500, (64, 64))?, 0.25, &noise, 500)?;
    let p = SsimParams::default();
    for steps in [1, 10] {
        let traj = TrajectoryConfig { t_start: 0.0, t_end: 1.0, steps };
        let seq = enhance_image(&crfi, &crfr, &test.low, &traj, &DecompParams::default())?;
        let img = seq.last();
        println!(
            "steps={steps} psnr={:.2} ssim={:.4}",
            psnr(img, &test.normal)?,
            ssim(img, &test.normal, &p)?
        );
        save_image(img, out.join(format!("enhanced_{steps}.png")))?;
    }
    println!("input psnr={:.2}", psnr(&test.low, &test.normal)?);
    save_image(&test.low, out.join("low.png"))?;
    save_image(&test.normal, out.join("reference.png"))?;
    println!("images in {}", out.display());
    Ok(())
}
