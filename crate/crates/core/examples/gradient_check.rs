//! Finite-difference verification of every differentiable primitive, the
//! velocity network, and both training losses.
//!
//! cargo run --release --example gradient_check -- [SEED]

use retiflow::selftest::{gradcheck_suite, GRADCHECK_TOLERANCE};

fn main() -> retiflow::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let suite = gradcheck_suite(seed)?;
    for (name, r) in &suite {
        let status = if r.max_rel_error < GRADCHECK_TOLERANCE { "ok  " } else { "FAIL" };
        println!("{status} {name:<18} max_rel_error={:.2e} entries={}", r.max_rel_error, r.checked);
    }
    Ok(())
}
