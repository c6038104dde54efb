//! Diagnostics over the exact gradients: decomposition by segment and
//! origin, a finite-difference verification harness, and a parallel
//! ablation matrix runner.
//!
//! The decomposition re-derives the per-token gradient accumulation
//! independently of the loss implementation, so the additivity check
//! doubles as a cross-validation of the production gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{generate_instance, perception_reward, EnvConfig, ExpertSpec, QueryMix};
use crate::error::Result;
use crate::objective::{
    advantages, loss_and_grad, token_weights, LossOutcome, ObjectiveConfig, Variant,
};
use crate::policy::{Arch, Context, PolicyParams};
use crate::rollout::{sample_group, score_under, Expert, Origin, RolloutGroup};
use crate::trainer::{train, TrainConfig};

/// Gradient split along two independent axes plus the KL penalty part.
/// Each surrogate token term is attributed whole (including the coupling
/// through the trajectory-normalized weight) to the span and origin of the
/// token that owns the term.
#[derive(Debug, Clone)]
pub struct GradientDecomposition {
    pub perception: Vec<f64>,
    pub reasoning: Vec<f64>,
    pub on_policy: Vec<f64>,
    pub expert: Vec<f64>,
    pub kl: Vec<f64>,
}

impl GradientDecomposition {
    /// perception + reasoning + kl (== on_policy + expert + kl).
    pub fn total(&self) -> Vec<f64> {
        self.perception
            .iter()
            .zip(&self.reasoning)
            .zip(&self.kl)
            .map(|((p, r), k)| p + r + k)
            .collect()
    }
}

/// Recompute the batch gradient with per-token attribution. Returns `None`
/// when dynamic sampling drops every group.
pub fn decompose_gradient(
    groups: &[RolloutGroup],
    policy: &PolicyParams,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<Option<GradientDecomposition>> {
    cfg.validate()?;
    let shaped = |g: &RolloutGroup| -> Vec<f64> {
        g.trajectories
            .iter()
            .map(|t| {
                let mut r = t.reward;
                if cfg.variant == Variant::Perception {
                    r += cfg.lambda_perception * perception_reward(&t.tokens, &t.spans, &g.instance);
                }
                r
            })
            .collect()
    };
    let surviving: Vec<&RolloutGroup> = if cfg.dynamic_sampling {
        groups
            .iter()
            .filter(|g| {
                let r = shaped(g);
                r.iter().any(|&x| x != r[0])
            })
            .collect()
    } else {
        groups.iter().collect()
    };
    if surviving.is_empty() {
        return Ok(None);
    }

    let n = policy.theta.len();
    let mut d = GradientDecomposition {
        perception: vec![0.0; n],
        reasoning: vec![0.0; n],
        on_policy: vec![0.0; n],
        expert: vec![0.0; n],
        kl: vec![0.0; n],
    };
    let n_groups = surviving.len() as f64;
    let dapo = cfg.variant.is_dapo_family();
    let (lo, hi) = cfg.clip_bounds();
    let use_kl = !dapo && cfg.kl_coeff > 0.0;
    let mut kl_raw = vec![0.0; n];
    let mut n_tok = 0usize;

    for group in &surviving {
        let adv = advantages(&shaped(group), cfg.eps_std);
        let group_tokens: usize = group.trajectories.iter().map(|t| t.tokens.len()).sum();
        for (i, traj) in group.trajectories.iter().enumerate() {
            let l = traj.tokens.len();
            if l == 0 {
                continue;
            }
            let norm = if dapo {
                1.0 / (n_groups * group_tokens as f64)
            } else {
                1.0 / (n_groups * group.len() as f64 * l as f64)
            };
            let logp_theta = score_under(policy, traj, &group.instance);
            let ctxs: Vec<Context> = (0..l)
                .map(|t| {
                    Context::from_prefix(
                        &group.instance.encoding,
                        &traj.tokens[..t],
                        policy.window,
                        policy.vocab.pad(),
                    )
                })
                .collect();
            let a_hat = adv[i];
            let perc = traj.spans.perception_range();

            // per-token coefficient and gate, mirroring the loss
            let (r_tilde, rho, w): (Vec<f64>, Vec<f64>, Vec<f64>) = match traj.origin {
                Origin::OnPolicy => {
                    let r: Vec<f64> = logp_theta
                        .iter()
                        .zip(&traj.logp_behavior)
                        .map(|(a, b)| (a - b).exp())
                        .collect();
                    (r.clone(), vec![0.0; l], vec![0.0; l])
                }
                Origin::Expert => {
                    let mask = if cfg.filtering { traj.reward } else { 1.0 };
                    let tw = token_weights(&logp_theta, &traj.logp_behavior, cfg.beta, cfg.eps_std);
                    let rho: Vec<f64> = (0..l)
                        .map(|t| (logp_theta[t] - traj.logp_behavior[t]).exp())
                        .collect();
                    let w: Vec<f64> = tw
                        .iter()
                        .map(|x| if cfg.reweighting { x.weight } else { 1.0 })
                        .collect();
                    let r = (0..l).map(|t| mask * rho[t] * w[t]).collect();
                    (r, rho, w)
                }
            };
            if a_hat == 0.0 {
                if !use_kl {
                    continue;
                }
            }
            let mask = if traj.origin == Origin::Expert {
                if cfg.filtering {
                    traj.reward
                } else {
                    1.0
                }
            } else {
                1.0
            };

            // discrepancy statistics for the weight coupling
            let (sigma, sp, dvec) = if traj.origin == Origin::Expert {
                let deltas: Vec<f64> = traj
                    .logp_behavior
                    .iter()
                    .zip(&logp_theta)
                    .map(|(phi, th)| phi - th)
                    .collect();
                let mean = deltas.iter().sum::<f64>() / l as f64;
                let var = deltas.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / l as f64;
                let s = var.sqrt();
                (s, s + cfg.eps_std, deltas.iter().map(|x| x - mean).collect())
            } else {
                (0.0, cfg.eps_std, Vec::new())
            };

            for t in 0..l {
                if a_hat == 0.0 {
                    break;
                }
                let flows = if a_hat > 0.0 {
                    r_tilde[t] <= hi
                } else if a_hat < 0.0 {
                    r_tilde[t] >= lo
                } else {
                    false
                };
                if !flows {
                    continue;
                }
                let a_t = -norm * a_hat;
                let in_perception = perc.contains(&t);
                // every scatter from token t's term lands in t's buckets
                match traj.origin {
                    Origin::OnPolicy => {
                        let scale = a_t * r_tilde[t];
                        {
                            let span_buf =
                                if in_perception { &mut d.perception } else { &mut d.reasoning };
                            policy.accum_grad_log_prob(&ctxs[t], traj.tokens[t], scale, span_buf);
                        }
                        policy.accum_grad_log_prob(&ctxs[t], traj.tokens[t], scale, &mut d.on_policy);
                    }
                    Origin::Expert => {
                        if mask == 0.0 {
                            continue;
                        }
                        let direct = a_t * mask * w[t] * rho[t];
                        {
                            let span_buf =
                                if in_perception { &mut d.perception } else { &mut d.reasoning };
                            policy.accum_grad_log_prob(&ctxs[t], traj.tokens[t], direct, span_buf);
                        }
                        policy.accum_grad_log_prob(&ctxs[t], traj.tokens[t], direct, &mut d.expert);
                        if cfg.reweighting && !cfg.detach_weight && cfg.beta != 0.0 {
                            let u_t = a_t * mask * rho[t] * cfg.beta * w[t] * (1.0 - w[t]);
                            for s in 0..l {
                                let delta_ts = if s == t { 1.0 } else { 0.0 };
                                let mut c = (delta_ts - 1.0 / l as f64) / sp;
                                if sigma > 0.0 {
                                    c -= dvec[t] * dvec[s] / (l as f64 * sigma * sp * sp);
                                }
                                let coef = -u_t * c;
                                {
                                    let span_buf = if in_perception {
                                        &mut d.perception
                                    } else {
                                        &mut d.reasoning
                                    };
                                    policy.accum_grad_log_prob(
                                        &ctxs[s],
                                        traj.tokens[s],
                                        coef,
                                        span_buf,
                                    );
                                }
                                policy.accum_grad_log_prob(&ctxs[s], traj.tokens[s], coef, &mut d.expert);
                            }
                        }
                    }
                }
            }

            if use_kl {
                for ctx in &ctxs {
                    let la = policy.log_probs(ctx);
                    let lb = reference.log_probs(ctx);
                    let coeffs: Vec<f64> = la
                        .iter()
                        .zip(&lb)
                        .map(|(&av, &bv)| av.exp() * (av - bv))
                        .collect();
                    policy.accum_grad_log_probs_weighted(ctx, &coeffs, &mut kl_raw);
                }
            }
            n_tok += l;
        }
    }
    if use_kl && n_tok > 0 {
        let s = cfg.kl_coeff / n_tok as f64;
        for (k, r) in d.kl.iter_mut().zip(&kl_raw) {
            *k = s * r;
        }
    }
    Ok(Some(d))
}

/// Result of one finite-difference sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub arch: String,
    pub groups_checked: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

/// Small randomized environment for gradient checking.
fn gradcheck_env(rng: &mut ChaCha8Rng) -> EnvConfig {
    EnvConfig {
        cells: rng.gen_range(2..4),
        symbols: 3,
        vocab_size: 9,
        max_len: 10,
        query_mix: QueryMix::uniform(),
        context_window: 4,
    }
}

/// Compare the analytic gradient against central finite differences over
/// many independently sampled small groups. `coords_per_group` random
/// coordinates are probed per group with step 1e-5; the relative error
/// denominator is max(1e-8, |analytic|, |numeric|).
pub fn gradcheck(
    variant: Variant,
    arch_kind: &str,
    n_groups: usize,
    coords_per_group: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut max_rel: f64 = 0.0;
    let mut coords = 0usize;
    let mut groups_done = 0usize;
    let mut attempt = 0u64;
    while groups_done < n_groups {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rollout::derive_seed(seed, attempt));
        attempt += 1;
        let env = gradcheck_env(&mut rng);
        let arch = match arch_kind {
            "tabular" => Arch::Tabular { buckets: 128 },
            "mlp" => Arch::Mlp {
                hidden: 4,
                obs_dims: env.obs_dims(),
            },
            other => {
                return Err(crate::error::Error::Config(format!(
                    "unknown architecture '{other}', expected 'tabular' or 'mlp'"
                )))
            }
        };
        let inst = generate_instance(&mut rng, &env)?;
        let mut snapshot =
            PolicyParams::init(arch, env.vocab(), env.context_window, rng.gen())?;
        snapshot
            .theta
            .iter_mut()
            .for_each(|x| *x += rng.gen_range(-0.4..0.4));
        let expert = Expert::from_spec(ExpertSpec::new(0.2)?, &env);
        // groups stay small (2 to 4 members) so finite differences on every
        // variant remain cheap
        let total = rng.gen_range(2..=4usize);
        let n_off = rng.gen_range(0..=(total - 1).min(2));
        let n_on = total - n_off;
        let group = sample_group(&snapshot, &expert, &inst, n_on, n_off, &env, None, &mut rng)?;
        let mut policy = snapshot.clone();
        policy
            .theta
            .iter_mut()
            .for_each(|x| *x += rng.gen_range(-0.05..0.05));
        let cfg = ObjectiveConfig {
            variant,
            ..ObjectiveConfig::defaults(variant)
        };
        let groups = [group];
        let LossOutcome::Evaluated { grad, .. } =
            loss_and_grad(&groups, &policy, &snapshot, &cfg)?
        else {
            // zero-signal group dropped by dynamic sampling; resample
            continue;
        };
        // differencing the loss term-by-term keeps FD roundoff scaled to
        // the terms a coordinate actually touches; see `loss_atoms`
        let atoms_at = |theta: &[f64]| -> Result<Vec<f64>> {
            let mut p = policy.clone();
            p.theta.copy_from_slice(theta);
            Ok(crate::objective::loss_atoms(&groups, &p, &snapshot, &cfg)?
                .expect("survival is theta-independent"))
        };
        let step = 1e-5;
        let fd_at = |i: usize, h: f64| -> Result<f64> {
            let mut plus = policy.theta.clone();
            plus[i] += h;
            let mut minus = policy.theta.clone();
            minus[i] -= h;
            let diff: f64 = atoms_at(&plus)?
                .iter()
                .zip(&atoms_at(&minus)?)
                .map(|(a, b)| a - b)
                .sum();
            Ok(diff / (2.0 * h))
        };
        let mut probed = 0;
        let mut tries = 0;
        while probed < coords_per_group && tries < coords_per_group * 20 {
            tries += 1;
            let i = rng.gen_range(0..policy.theta.len());
            let fd = fd_at(i, step)?;
            // coordinates this small drown in f64 roundoff at the fixed
            // step: differencing carries ~1e-11 absolute noise when every
            // parameter touches every token (mlp), so the comparison is
            // only meaningful on well-scaled coordinates. A wrong formula
            // still fails there
            if f64::max(grad[i].abs(), fd.abs()) < 2e-5 {
                continue;
            }
            // the surrogate has min/clip kinks; central differences straddling
            // one measure a chord, not the one-sided derivative the loss
            // reports. A genuine gradient bug passes this filter (both
            // estimates agree with each other, not with the analytic value)
            let fd_half = fd_at(i, step / 2.0)?;
            let scale = f64::max(1e-8, f64::max(fd.abs(), fd_half.abs()));
            if (fd - fd_half).abs() / scale > 1e-6 {
                continue;
            }
            let rel = (grad[i] - fd).abs() / f64::max(1e-8, f64::max(grad[i].abs(), fd.abs()));
            max_rel = max_rel.max(rel);
            probed += 1;
            coords += 1;
        }
        groups_done += 1;
    }
    Ok(GradCheckReport {
        variant,
        arch: arch_kind.into(),
        groups_checked: groups_done,
        coords_checked: coords,
        max_rel_err: max_rel,
    })
}

/// One configuration row of the ablation matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSpec {
    pub label: String,
    pub variant: Variant,
    pub filtering: bool,
    pub reweighting: bool,
    pub n_off: usize,
    /// None selects the family default.
    pub beta: Option<f64>,
}

impl AblationSpec {
    pub fn of(variant: Variant) -> Self {
        AblationSpec {
            label: variant.to_string(),
            variant,
            filtering: true,
            reweighting: true,
            n_off: 1,
            beta: None,
        }
    }
}

/// Outcome of one (spec, seed) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub seed: u64,
    pub final_eval: f64,
    pub skipped_steps: usize,
}

/// Run every spec on every seed in parallel. Each cell trains a fresh
/// policy; results come back in (spec-major, seed-minor) order.
pub fn ablation_matrix(
    env: &EnvConfig,
    arch: &Arch,
    base_tc: &TrainConfig,
    specs: &[AblationSpec],
    seeds: &[u64],
) -> Result<Vec<AblationResult>> {
    let cells: Vec<(usize, u64)> = specs
        .iter()
        .enumerate()
        .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(i, seed)| {
            let spec = &specs[i];
            let mut obj = ObjectiveConfig::defaults(spec.variant);
            obj.filtering = spec.filtering;
            obj.reweighting = spec.reweighting;
            if let Some(b) = spec.beta {
                obj.beta = b;
            }
            let mut tc = base_tc.clone();
            tc.n_off = spec.n_off;
            tc.seed = seed;
            let policy =
                PolicyParams::init(arch.clone(), env.vocab(), env.context_window, seed)?;
            let out = train(policy, env, &obj, &tc, |_| {})?;
            Ok(AblationResult {
                label: spec.label.clone(),
                seed,
                final_eval: out.final_eval,
                skipped_steps: out.skipped_steps,
            })
        })
        .collect()
}
