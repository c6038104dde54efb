//! Train the full method on the sparse-reward "needle" preset and watch the
//! expert signal pull the policy out of the flat-reward regime.
//!
//! The needle environment pays 1.0 only for the exact answer followed by the
//! end token; a blind policy almost never stumbles on it, so pure on-policy
//! groups carry no gradient. A single expert trajectory per group changes
//! that.
//!
//! Usage: cargo run --release --example train_needle [steps] [seed]

use tgrl::config::preset;
use tgrl::policy::PolicyParams;
use tgrl::trainer::train;

fn main() -> tgrl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(800);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut cfg = preset("needle")?;
    cfg.train.steps = steps;
    cfg.train.seed = seed;

    let policy = PolicyParams::init(
        cfg.arch.clone(),
        cfg.env.vocab(),
        cfg.env.context_window,
        seed,
    )?;

    println!(
        "needle: {} cells x {} symbols, vocab {}, {} steps, group {}+{} (on+expert), seed {seed}",
        cfg.env.cells,
        cfg.env.symbols,
        cfg.env.vocab_size,
        steps,
        cfg.train.n_on,
        cfg.train.n_off,
    );
    println!(
        "{:>6} {:>10} {:>9} {:>9} {:>7} {:>7} {:>8}",
        "step", "loss", "r_on", "r_exp", "mask", "mean_w", "eval"
    );

    let start = std::time::Instant::now();
    let out = train(policy, &cfg.env, &cfg.objective, &cfg.train, |m| {
        if let Some(acc) = m.eval_acc {
            println!(
                "{:>6} {:>10.4} {:>9.3} {:>9.3} {:>7.2} {:>7.3} {:>8.3}",
                m.step, m.loss, m.reward_on, m.reward_exp, m.mask_rate, m.mean_w, acc
            );
        }
    })?;

    println!(
        "final greedy accuracy {:.3} after {} steps in {:.1}s",
        out.final_eval,
        steps,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
