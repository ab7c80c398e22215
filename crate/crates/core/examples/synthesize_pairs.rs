//! Writes a small paired low/normal-light dataset with ground-truth factors.
//!
//! cargo run --release --example synthesize_pairs -- [OUT_DIR] [COUNT]

use std::path::PathBuf;

use retiflow::synthdata::{read_pairs_root, write_pair_dir, NoiseSpec, PairManifest};

fn main() -> retiflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("retiflow-pairs"));
    let count: u64 = args.next().and_then(|c| c.parse().ok()).unwrap_or(4);

    for seed in 0..count {
        let manifest = PairManifest {
            seed,
            height: 64,
            width: 64,
            low_delta: 0.25,
            noise: NoiseSpec { gaussian_sigma: 0.05, speckle_sigma: 0.02, chroma_shift: 0.01 },
        };
        let pair = write_pair_dir(&out.join(seed.to_string()), &manifest)?;
        let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
        println!(
            "seed={seed} mean_low={:.3} mean_normal={:.3}",
            mean(pair.low.data()),
            mean(pair.normal.data())
        );
    }
    let pairs = read_pairs_root(&out)?;
    println!("wrote {} pairs under {}", pairs.len(), out.display());
    Ok(())
}
