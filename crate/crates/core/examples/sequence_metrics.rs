//! Transports an illumination map past the normal-light time and scores every
//! step against the reference, the way `eval-seq` does.
//!
//! cargo run --release --example sequence_metrics -- [CSV]

use std::path::PathBuf;

use retiflow::autodiff::NetworkSpec;
use retiflow::crfi::{train_crfi, CrfiTrainConfig, DatasetSampler};
use retiflow::imagecore::recompose;
use retiflow::integrator::{integrate, TrajectoryConfig};
use retiflow::metrics::{sequence_metrics, SsimParams};
use retiflow::synthdata::{make_pair, render_scene, NoiseSpec};

fn main() -> retiflow::Result<()> {
    let csv = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("retiflow-seq.csv"));
    let pairs = (0..32)
        .map(|s| make_pair(&render_scene(s, (64, 64))?, 0.25, &NoiseSpec::default(), s))
        .collect::<retiflow::Result<Vec<_>>>()?;
    let cfg = CrfiTrainConfig {
        iterations: 600,
        lr: 3e-3,
        seed: 1,
        patch_size: 16,
        network: NetworkSpec { in_channels: 1, hidden_channels: 8, depth: 2, embed_dim: 8 },
        ..CrfiTrainConfig::default()
    };
    let net = train_crfi(&mut DatasetSampler::from_training_pairs(&pairs, 5)?, &cfg)?.net;

    let test = make_pair(&render_scene(100, (64, 64))?, 0.25, &NoiseSpec::default(), 100)?;
    let traj = TrajectoryConfig { t_start: 0.0, t_end: 1.2, steps: 12 };
    let seq = integrate(&net, &test.low_illum, &traj)?;
    let frames = seq
        .levels
        .iter()
        .map(|l| recompose(l, &test.low_refl))
        .collect::<retiflow::Result<Vec<_>>>()?;
    let report = sequence_metrics(&frames, &seq.times, &test.normal, &SsimParams::default())?;
    print!("{}", report.to_csv());
    let best = &report.rows[report.argmax_psnr()];
    println!("peak psnr {:.2} dB at t={:.2}", best.psnr_db, best.t);
    std::fs::write(&csv, report.to_csv())?;
    println!("csv: {}", csv.display());
    Ok(())
}
