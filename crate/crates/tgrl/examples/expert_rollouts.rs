//! Sample a mixed rollout group (on-policy + expert members) and print
//! each trajectory with its reward, plus the token-level diagnostics the
//! objective derives for expert members: the student/expert log-prob gap,
//! its within-trajectory normalization, and the resulting soft weight.
//!
//! Usage: cargo run --example expert_rollouts [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tgrl::config::preset;
use tgrl::env::{generate_instance, ExpertSpec};
use tgrl::objective::{expert_mask, token_weights, ObjectiveConfig, Variant};
use tgrl::policy::PolicyParams;
use tgrl::rollout::{sample_group, score_under, Expert, Origin};

fn main() -> tgrl::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7);

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
    let instance = generate_instance(&mut rng, &cfg.env)?;
    let group = sample_group(
        &policy,
        &expert,
        &instance,
        cfg.train.n_on,
        cfg.train.n_off,
        &cfg.env,
        None,
        &mut rng,
    )?;

    println!(
        "instance: cells {:?}, query {:?}, ground truth {}",
        instance.cells, instance.query, instance.ground_truth
    );
    println!(
        "group of {} ({} on-policy + {} expert), reward mean {:.3} std {:.3}\n",
        group.len(),
        cfg.train.n_on,
        cfg.train.n_off,
        group.reward_mean,
        group.reward_std
    );

    for (i, traj) in group.trajectories.iter().enumerate() {
        println!(
            "#{i} {:?} reward {:.1} tokens {:?} prediction {:?}",
            traj.origin, traj.reward, traj.tokens, traj.prediction
        );
        if traj.origin == Origin::Expert {
            let logp_theta = score_under(&policy, traj, &instance);
            let weights =
                token_weights(&logp_theta, &traj.logp_behavior, obj.beta, obj.eps_std);
            println!("   correctness gate m = {}", expert_mask(traj)?);
            println!("   {:>4} {:>9} {:>9} {:>9} {:>7}", "t", "lp_theta", "lp_phi", "delta_n", "w");
            for (t, w) in weights.iter().enumerate() {
                println!(
                    "   {:>4} {:>9.3} {:>9.3} {:>9.3} {:>7.3}",
                    t, logp_theta[t], traj.logp_behavior[t], w.delta_norm, w.weight
                );
            }
        }
    }
    Ok(())
}
