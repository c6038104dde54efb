//! Split one batch gradient along two axes: perception vs reasoning tokens,
//! and on-policy vs expert members (KL kept separate), then confirm each
//! split sums back to the production gradient.
//!
//! Usage: cargo run --example gradient_decomposition [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tgrl::analysis::decompose_gradient;
use tgrl::config::preset;
use tgrl::env::{generate_instance, ExpertSpec};
use tgrl::objective::{loss_and_grad, LossOutcome, ObjectiveConfig, Variant};
use tgrl::policy::PolicyParams;
use tgrl::rollout::{sample_group, Expert};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn main() -> tgrl::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);

    let cfg = preset("needle")?;
    let obj = ObjectiveConfig::defaults(Variant::TgrlGrpo);
    let policy = PolicyParams::init(
        cfg.arch.clone(),
        cfg.env.vocab(),
        cfg.env.context_window,
        seed,
    )?;
    let expert = Expert::from_spec(ExpertSpec::new(cfg.train.expert_error_rate)?, &cfg.env);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for _ in 0..4 {
        let inst = generate_instance(&mut rng, &cfg.env)?;
        groups.push(sample_group(
            &policy,
            &expert,
            &inst,
            cfg.train.n_on,
            cfg.train.n_off,
            &cfg.env,
            None,
            &mut rng,
        )?);
    }

    let d = decompose_gradient(&groups, &policy, &policy, &obj)?
        .expect("no dynamic sampling, nothing skipped");
    let grad = match loss_and_grad(&groups, &policy, &policy, &obj)? {
        LossOutcome::Evaluated { grad, .. } => grad,
        LossOutcome::Skipped => unreachable!(),
    };

    println!("gradient component norms over {} groups:", groups.len());
    println!("  perception  {:>12.6}", norm(&d.perception));
    println!("  reasoning   {:>12.6}", norm(&d.reasoning));
    println!("  on-policy   {:>12.6}", norm(&d.on_policy));
    println!("  expert      {:>12.6}", norm(&d.expert));
    println!("  kl          {:>12.6}", norm(&d.kl));

    let total = d.total();
    let err = total
        .iter()
        .zip(&grad)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    println!("max |decomposed - production| = {err:.3e}");
    assert!(err <= 1e-10);
    Ok(())
}
