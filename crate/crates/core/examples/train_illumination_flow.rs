//! Trains the illumination flow on the constant-offset toy task, where the
//! true velocity is 0.5 everywhere, then on synthetic scenes.
//!
//! cargo run --release --example train_illumination_flow -- [CHECKPOINT]

use std::path::PathBuf;

use retiflow::autodiff::{save_checkpoint, NetworkSpec};
use retiflow::crfi::{offset_toy_pairs, train_crfi, CrfiTrainConfig, DatasetSampler};
use retiflow::selftest::{toy_flow_config, toy_probe_error};
use retiflow::synthdata::{make_pair, render_scene, NoiseSpec};

fn main() -> retiflow::Result<()> {
    let ckpt = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("retiflow-crfi.ckpt"));

    let mut toy = DatasetSampler::new(offset_toy_pairs(256, 4, 0.5, 1)?, 2)?;
    let out = train_crfi(&mut toy, &toy_flow_config(3, 2000))?;
    println!("toy task: worst |v - 0.5| on the probe grid = {:.4}", toy_probe_error(&out.net)?);

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
    let out = train_crfi(&mut DatasetSampler::from_training_pairs(&pairs, 5)?, &cfg)?;
    for (i, row) in out.trace.rows.iter().enumerate().step_by(100) {
        println!("iter={} cfm={:.5} consistency={:.5}", i + 1, row.cfm, row.consistency);
    }
    save_checkpoint(&out.net, &ckpt)?;
    println!("checkpoint={}", ckpt.display());
    Ok(())
}
