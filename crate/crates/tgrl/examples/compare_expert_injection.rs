//! Small ablation grid on a shortened needle run: pure on-policy baseline,
//! the full method, and the method with filtering or re-weighting switched
//! off, each over a couple of seeds.
//!
//! This is a quick-look version of the `ablate` subcommand; expect noisy
//! numbers at this step count.
//!
//! Usage: cargo run --release --example compare_expert_injection [steps]

use tgrl::analysis::{ablation_matrix, AblationSpec};
use tgrl::config::preset;
use tgrl::objective::Variant;

fn main() -> tgrl::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(400);

    let cfg = preset("needle")?;
    let mut tc = cfg.train.clone();
    tc.steps = steps;

    let specs = vec![
        AblationSpec {
            label: "grpo (no experts)".into(),
            variant: Variant::Grpo,
            n_off: 0,
            ..AblationSpec::of(Variant::Grpo)
        },
        AblationSpec::of(Variant::TgrlGrpo),
        AblationSpec {
            label: "tgrl-grpo no-filter".into(),
            filtering: false,
            ..AblationSpec::of(Variant::TgrlGrpo)
        },
        AblationSpec {
            label: "tgrl-grpo no-reweight".into(),
            reweighting: false,
            ..AblationSpec::of(Variant::TgrlGrpo)
        },
    ];
    let seeds = [0, 1];

    println!("{steps} steps per cell, seeds {seeds:?}");
    let start = std::time::Instant::now();
    let results = ablation_matrix(&cfg.env, &cfg.arch, &tc, &specs, &seeds)?;

    println!("{:<24} {:>6} {:>12} {:>9}", "config", "seed", "final_eval", "skipped");
    for r in &results {
        println!(
            "{:<24} {:>6} {:>12.3} {:>9}",
            r.label, r.seed, r.final_eval, r.skipped_steps
        );
    }
    println!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
