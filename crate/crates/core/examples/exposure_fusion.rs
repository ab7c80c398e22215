//! Builds an exposure sweep of a synthetic scene, checks that pixel values
//! grow linearly with the exposure factor, and fuses the sweep.
//!
//! cargo run --release --example exposure_fusion -- [OUT_PNG]

use std::path::PathBuf;

use retiflow::imagecore::save_image;
use retiflow::mef::{fuse, mean_well_exposedness, FusionParams};
use retiflow::synthdata::{expose, render_scene, ExposureSpec, ResponseCurve};

fn main() -> retiflow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("retiflow-fused.png"));
    let scene = render_scene(42, (64, 64))?;

    let stops = [-3.0, -2.0, -1.0, 0.0, 0.5, 1.0];
    let sweep = stops
        .iter()
        .map(|ev: &f64| expose(&scene, &ExposureSpec::new(ev.exp2(), ResponseCurve::Gamma(2.2))?))
        .collect::<retiflow::Result<Vec<_>>>()?;
    let sigma = FusionParams::default().sigma_e;
    for (ev, img) in stops.iter().zip(&sweep) {
        println!("ev={ev:+.1} well_exposedness={:.4}", mean_well_exposedness(img, sigma));
    }

    let fused = fuse(&sweep, &FusionParams::default())?;
    println!("fused well_exposedness={:.4}", mean_well_exposedness(&fused, sigma));
    save_image(&fused, &out)?;

    // Under the identity response an unclipped pixel is exactly delta * irradiance.
    let q = 64 * 32 + 32;
    for delta in [0.2, 0.4, 0.8] {
        let v = expose(&scene, &ExposureSpec::linear(delta)?)?.data()[q];
        println!("delta={delta} value={v:.4} ratio={:.4}", v / delta);
    }
    println!("fused image: {}", out.display());
    Ok(())
}
