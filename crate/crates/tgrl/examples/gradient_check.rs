//! Verify every objective variant's analytic gradient against central
//! finite differences, on both architectures, over freshly sampled small
//! rollout groups.
//!
//! The differencing works on the loss's per-token atoms rather than the
//! scalar total, so atoms untouched by a coordinate perturbation cancel
//! bit-exactly and the comparison is not limited by summation roundoff.
//!
//! Usage: cargo run --release --example gradient_check [groups] [seed]

use tgrl::analysis::gradcheck;
use tgrl::objective::Variant;

fn main() -> tgrl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let groups: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let tol = 1e-6;

    let start = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    println!("{:<14} {:<8} {:>8} {:>8} {:>14}", "variant", "arch", "groups", "coords", "max_rel_err");
    for variant in Variant::all() {
        for arch in ["tabular", "mlp"] {
            let r = gradcheck(variant, arch, groups, 20, seed)?;
            println!(
                "{:<14} {:<8} {:>8} {:>8} {:>14.3e}",
                r.variant.to_string(),
                r.arch,
                r.groups_checked,
                r.coords_checked,
                r.max_rel_err
            );
            worst = worst.max(r.max_rel_err);
        }
    }
    println!(
        "worst relative error {:.3e} (tolerance {:.0e}) in {:.1}s",
        worst,
        tol,
        start.elapsed().as_secs_f64()
    );
    assert!(worst <= tol, "gradient check failed");
    Ok(())
}
