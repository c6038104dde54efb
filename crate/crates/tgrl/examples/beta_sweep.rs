//! Show how the sharpness parameter beta shapes the token re-weighting.
//!
//! The weight of each expert token is sigmoid(beta * normalized log-prob
//! gap): beta = 0 collapses everything to 0.5 (plain uniform imitation),
//! and larger beta concentrates the update on the tokens where student and
//! expert disagree most.
//!
//! Usage: cargo run --example beta_sweep

use tgrl::objective::token_weights;

fn main() {
    // student vs expert per-token log-probs on a hypothetical trajectory:
    // tokens 2 and 5 are where the expert strongly disagrees
    let logp_theta = [-0.2, -0.5, -4.5, -0.3, -0.9, -6.0, -0.1];
    let logp_phi = [-0.3, -0.4, -0.2, -0.3, -0.7, -0.1, -0.2];
    let eps_std = 1e-6;

    print!("{:>6}", "beta");
    for t in 0..logp_theta.len() {
        print!(" {:>7}", format!("w[{t}]"));
    }
    println!();

    for beta in [0.0, 0.5, 1.0, 2.0, 5.0, 14.0] {
        let w = token_weights(&logp_theta, &logp_phi, beta, eps_std);
        print!("{:>6.1}", beta);
        for tw in &w {
            print!(" {:>7.3}", tw.weight);
        }
        println!();
    }

    let w5 = token_weights(&logp_theta, &logp_phi, 5.0, eps_std);
    let (hot, _) = w5
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.weight.total_cmp(&b.1.weight))
        .unwrap();
    let w0 = token_weights(&logp_theta, &logp_phi, 0.0, eps_std);
    println!("\nat beta = 5 the update mass concentrates on token {hot} (largest gap)");
    println!(
        "at beta = 0 every weight is exactly 0.5: {}",
        w0.iter().all(|tw| tw.weight == 0.5)
    );
}
