//! Advantage computation, per-token coefficients, and the scalar loss with
//! its exact parameter gradient for every objective variant.
//!
//! All variants share one clipped-surrogate core over a unified per-token
//! coefficient: the on-policy importance ratio for student rollouts, and
//! mask * expert-ratio * discrepancy-weight for expert rollouts. The GRPO
//! family averages per-trajectory token means and adds a KL penalty against
//! the frozen reference; the DAPO family normalizes by the total token
//! count, decouples the clip bounds, and drops zero-signal groups.
//!
//! Losses are returned negated, so minimizing the loss ascends the
//! surrogate objective. Gradients are exact (finite-difference checked in
//! the acceptance suite) with the coefficient treated as a differentiable
//! function of theta, including the discrepancy-normalized token weight
//! unless `detach_weight` is set.

use serde::{Deserialize, Serialize};

use crate::env::perception_reward;
use crate::error::{Error, Result};
use crate::policy::{Context, PolicyParams};
use crate::rollout::{Origin, RolloutGroup, Trajectory};

/// Objective variant id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Grpo,
    Dapo,
    /// GRPO plus a perception-similarity reward shaped into the return
    /// before group normalization.
    Perception,
    TgrlGrpo,
    TgrlDapo,
}

impl Variant {
    pub fn is_dapo_family(&self) -> bool {
        matches!(self, Variant::Dapo | Variant::TgrlDapo)
    }

    /// Reweighting sensitivity default: 5 on the GRPO base, 14 on the DAPO
    /// base (token-level averaging needs a sharper weight to stand out).
    pub fn default_beta(&self) -> f64 {
        if self.is_dapo_family() {
            14.0
        } else {
            5.0
        }
    }

    pub fn all() -> [Variant; 5] {
        [
            Variant::Grpo,
            Variant::Dapo,
            Variant::Perception,
            Variant::TgrlGrpo,
            Variant::TgrlDapo,
        ]
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Grpo => "grpo",
            Variant::Dapo => "dapo",
            Variant::Perception => "perception",
            Variant::TgrlGrpo => "tgrl-grpo",
            Variant::TgrlDapo => "tgrl-dapo",
        };
        f.write_str(s)
    }
}

/// Everything that parameterizes a loss variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    /// Symmetric clip radius (GRPO family).
    pub clip_eps: f64,
    /// Decoupled clip bounds (DAPO family).
    pub clip_eps_low: f64,
    pub clip_eps_high: f64,
    /// KL penalty coefficient against the frozen reference (GRPO family).
    pub kl_coeff: f64,
    /// Reweighting sensitivity for the expert-token discrepancy weight.
    pub beta: f64,
    /// Perception reward weight (perception variant only).
    pub lambda_perception: f64,
    /// Stabilizer added to standard deviations in both normalizations.
    pub eps_std: f64,
    /// Gate expert trajectories on final-answer correctness.
    pub filtering: bool,
    /// Apply the discrepancy-based token weight on expert tokens.
    pub reweighting: bool,
    /// Drop groups whose rewards are all equal before the update.
    pub dynamic_sampling: bool,
    /// Treat the token weight as a per-step constant instead of
    /// differentiating through it.
    pub detach_weight: bool,
}

impl ObjectiveConfig {
    pub fn defaults(variant: Variant) -> Self {
        ObjectiveConfig {
            variant,
            clip_eps: 0.2,
            clip_eps_low: 0.2,
            clip_eps_high: 0.28,
            kl_coeff: 0.01,
            beta: variant.default_beta(),
            lambda_perception: 0.5,
            eps_std: 1e-6,
            filtering: true,
            reweighting: true,
            dynamic_sampling: variant.is_dapo_family(),
            detach_weight: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_eps <= 0.0 {
            return Err(Error::Config("objective.clip_eps must be > 0".into()));
        }
        if self.clip_eps_low <= 0.0 {
            return Err(Error::Config("objective.clip_eps_low must be > 0".into()));
        }
        if self.clip_eps_high <= 0.0 {
            return Err(Error::Config("objective.clip_eps_high must be > 0".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("objective.beta must be >= 0".into()));
        }
        if self.eps_std <= 0.0 {
            return Err(Error::Config("objective.eps_std must be > 0".into()));
        }
        if self.kl_coeff < 0.0 {
            return Err(Error::Config("objective.kl_coeff must be >= 0".into()));
        }
        if self.lambda_perception < 0.0 {
            return Err(Error::Config("objective.lambda_perception must be >= 0".into()));
        }
        Ok(())
    }

    /// Clip interval for the unified coefficient.
    pub fn clip_bounds(&self) -> (f64, f64) {
        if self.variant.is_dapo_family() {
            (1.0 - self.clip_eps_low, 1.0 + self.clip_eps_high)
        } else {
            (1.0 - self.clip_eps, 1.0 + self.clip_eps)
        }
    }
}

/// Group-normalized advantages: (R_i - mean) / (popstd + eps_std).
/// With all rewards equal this yields exactly zero everywhere.
pub fn advantages(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    // exact zero for degenerate groups, not mean-roundoff noise over eps
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    let denom = var.sqrt() + eps_std;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Token-level off-policy correction ratio pi_theta / pi_phi at step t.
pub fn expert_ratio(logp_theta: &[f64], logp_phi: &[f64], t: usize) -> f64 {
    (logp_theta[t] - logp_phi[t]).exp()
}

/// Per-token discrepancy, its within-trajectory normalization, and the
/// bounded sigmoid weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenWeight {
    pub delta: f64,
    pub delta_norm: f64,
    pub weight: f64,
}

/// Discrepancy pipeline: delta_t = logp_phi - logp_theta, normalized within
/// the trajectory (population std, eps-stabilized), squashed through
/// sigmoid(beta * delta_norm).
pub fn token_weights(
    logp_theta: &[f64],
    logp_phi: &[f64],
    beta: f64,
    eps_std: f64,
) -> Vec<TokenWeight> {
    assert_eq!(logp_theta.len(), logp_phi.len());
    let deltas: Vec<f64> = logp_phi
        .iter()
        .zip(logp_theta)
        .map(|(phi, th)| phi - th)
        .collect();
    let l = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / l;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / l;
    let denom = var.sqrt() + eps_std;
    deltas
        .iter()
        .map(|&d| {
            let dn = (d - mean) / denom;
            TokenWeight {
                delta: d,
                delta_norm: dn,
                weight: 1.0 / (1.0 + (-beta * dn).exp()),
            }
        })
        .collect()
}

/// Binary correctness gate for an expert trajectory (its verified reward).
pub fn expert_mask(traj: &Trajectory) -> Result<f64> {
    if traj.origin != Origin::Expert {
        return Err(Error::Contract(
            "expert_mask called on an on-policy trajectory".into(),
        ));
    }
    Ok(traj.reward)
}

/// Per-token unified coefficient with its audit factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenCoeff {
    pub r_tilde: f64,
    /// Expert tokens only.
    pub rho: Option<f64>,
    pub delta: Option<f64>,
    pub delta_norm: Option<f64>,
    pub weight: Option<f64>,
    pub mask: Option<f64>,
    /// Set by the loss: true when the clipped branch was binding.
    pub clipped: bool,
}

/// Coefficients for one trajectory plus its student scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajCoefficients {
    pub origin: Origin,
    pub tokens: Vec<TokenCoeff>,
    pub logp_theta: Vec<f64>,
}

/// Compute the unified coefficient r~ and its factors for every trajectory
/// in a group. On-policy: exp(logp_theta - logp_behavior). Expert:
/// mask * rho * weight, with weight forced to 1 when reweighting is off and
/// mask forced to 1 when filtering is off.
pub fn unified_coefficients(
    group: &RolloutGroup,
    policy: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<Vec<TrajCoefficients>> {
    group
        .trajectories
        .iter()
        .map(|traj| {
            if traj.logp_behavior.len() != traj.tokens.len() {
                return Err(Error::Contract(
                    "trajectory behavior log-prob record does not cover all tokens".into(),
                ));
            }
            let logp_theta = crate::rollout::score_under(policy, traj, &group.instance);
            let tokens = match traj.origin {
                Origin::OnPolicy => logp_theta
                    .iter()
                    .zip(&traj.logp_behavior)
                    .map(|(th, old)| TokenCoeff {
                        r_tilde: (th - old).exp(),
                        rho: None,
                        delta: None,
                        delta_norm: None,
                        weight: None,
                        mask: None,
                        clipped: false,
                    })
                    .collect(),
                Origin::Expert => {
                    let mask = if cfg.filtering { traj.reward } else { 1.0 };
                    let weights =
                        token_weights(&logp_theta, &traj.logp_behavior, cfg.beta, cfg.eps_std);
                    (0..traj.tokens.len())
                        .map(|t| {
                            let rho = expert_ratio(&logp_theta, &traj.logp_behavior, t);
                            let w = if cfg.reweighting { weights[t].weight } else { 1.0 };
                            TokenCoeff {
                                r_tilde: mask * rho * w,
                                rho: Some(rho),
                                delta: Some(weights[t].delta),
                                delta_norm: Some(weights[t].delta_norm),
                                weight: Some(w),
                                mask: Some(mask),
                                clipped: false,
                            }
                        })
                        .collect()
                }
            };
            Ok(TrajCoefficients {
                origin: traj.origin,
                tokens,
                logp_theta,
            })
        })
        .collect()
}

/// Per-batch diagnostics emitted alongside the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BatchMetrics {
    pub loss: f64,
    pub reward_on: f64,
    pub reward_exp: f64,
    pub adv_abs_on: f64,
    pub adv_abs_exp: f64,
    pub mean_w: f64,
    pub mask_rate: f64,
    pub clip_frac_on: f64,
    pub clip_frac_exp: f64,
    pub kl: f64,
    pub skipped_groups: usize,
    pub total_groups: usize,
}

/// Result of one loss evaluation.
#[derive(Debug, Clone)]
pub enum LossOutcome {
    Evaluated {
        loss: f64,
        grad: Vec<f64>,
        metrics: BatchMetrics,
    },
    /// Dynamic sampling removed every group (zero advantage signal
    /// everywhere); no update this step.
    Skipped,
}

struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn new() -> Self {
        Mean { sum: 0.0, n: 0 }
    }

    fn push(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

fn contexts_for(policy: &PolicyParams, traj: &Trajectory, group: &RolloutGroup) -> Vec<Context> {
    let pad = policy.vocab.pad();
    (0..traj.tokens.len())
        .map(|t| {
            Context::from_prefix(
                &group.instance.encoding,
                &traj.tokens[..t],
                policy.window,
                pad,
            )
        })
        .collect()
}

/// Rewards entering group normalization: binary outcome, plus the
/// lambda-weighted perception similarity for the perception variant.
fn shaped_rewards(group: &RolloutGroup, cfg: &ObjectiveConfig) -> Vec<f64> {
    group
        .trajectories
        .iter()
        .map(|traj| {
            let mut r = traj.reward;
            if cfg.variant == Variant::Perception {
                r += cfg.lambda_perception
                    * perception_reward(&traj.tokens, &traj.spans, &group.instance);
            }
            r
        })
        .collect()
}

/// The loss as a stable-ordered vector of additive terms: one per token
/// (its normalized clipped-surrogate contribution, negated) followed by
/// one per context position (its scaled KL penalty). Summing the vector
/// reproduces the scalar loss up to rounding.
///
/// The atom layout depends only on the batch structure, never on theta,
/// so finite differences can subtract atoms pairwise. Terms untouched by
/// a perturbed coordinate cancel bit-exactly, which keeps FD roundoff
/// proportional to the affected terms instead of the whole loss.
pub fn loss_atoms(
    groups: &[RolloutGroup],
    policy: &PolicyParams,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<Option<Vec<f64>>> {
    cfg.validate()?;
    let surviving: Vec<&RolloutGroup> = if cfg.dynamic_sampling {
        groups
            .iter()
            .filter(|g| {
                let r = shaped_rewards(g, cfg);
                r.iter().any(|&x| x != r[0])
            })
            .collect()
    } else {
        groups.iter().collect()
    };
    if surviving.is_empty() {
        return Ok(None);
    }
    let n_groups = surviving.len() as f64;
    let dapo = cfg.variant.is_dapo_family();
    let (lo, hi) = cfg.clip_bounds();
    let use_kl = !dapo && cfg.kl_coeff > 0.0;
    let n_tok_total: usize = surviving
        .iter()
        .flat_map(|g| g.trajectories.iter())
        .map(|t| t.tokens.len())
        .sum();
    let mut atoms = Vec::new();
    for group in &surviving {
        let adv = advantages(&shaped_rewards(group, cfg), cfg.eps_std);
        let coeffs = unified_coefficients(group, policy, cfg)?;
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
            for t in 0..l {
                let r = coeffs[i].tokens[t].r_tilde;
                let clipped = r.clamp(lo, hi);
                atoms.push(-norm * f64::min(r * adv[i], clipped * adv[i]));
            }
            if use_kl && n_tok_total > 0 {
                let ctxs = contexts_for(policy, traj, group);
                let s = cfg.kl_coeff / n_tok_total as f64;
                for ctx in &ctxs {
                    let la = policy.log_probs(ctx);
                    let lb = reference.log_probs(ctx);
                    let kl: f64 = la
                        .iter()
                        .zip(&lb)
                        .map(|(&a, &b)| a.exp() * (a - b))
                        .sum();
                    atoms.push(s * kl);
                }
            }
        }
    }
    Ok(Some(atoms))
}

/// Negated surrogate objective and its exact gradient over a batch of
/// rollout groups. Returns `Skipped` when dynamic sampling leaves nothing.
pub fn loss_and_grad(
    groups: &[RolloutGroup],
    policy: &PolicyParams,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<LossOutcome> {
    cfg.validate()?;
    for g in groups {
        if g.len() < 2 {
            return Err(Error::Contract("rollout group with fewer than 2 members".into()));
        }
    }
    let surviving: Vec<&RolloutGroup> = if cfg.dynamic_sampling {
        groups
            .iter()
            .filter(|g| {
                let r = shaped_rewards(g, cfg);
                r.iter().any(|&x| x != r[0])
            })
            .collect()
    } else {
        groups.iter().collect()
    };
    let skipped_groups = groups.len() - surviving.len();
    if surviving.is_empty() {
        return Ok(LossOutcome::Skipped);
    }

    let n_params = policy.theta.len();
    let n_groups = surviving.len() as f64;
    let dapo = cfg.variant.is_dapo_family();
    let (lo, hi) = cfg.clip_bounds();
    let use_kl = !dapo && cfg.kl_coeff > 0.0;

    let mut grad = vec![0.0; n_params];
    let mut kl_grad = if use_kl { vec![0.0; n_params] } else { Vec::new() };
    let mut surrogate = 0.0; // the objective part, pre-negation
    let mut kl_sum = 0.0;
    let mut n_tok_total = 0usize;

    let mut m_reward_on = Mean::new();
    let mut m_reward_exp = Mean::new();
    let mut m_adv_on = Mean::new();
    let mut m_adv_exp = Mean::new();
    let mut m_w = Mean::new();
    let mut m_mask = Mean::new();
    let mut clip_on = Mean::new();
    let mut clip_exp = Mean::new();

    for group in &surviving {
        let adv = advantages(&shaped_rewards(group, cfg), cfg.eps_std);
        let mut coeffs = unified_coefficients(group, policy, cfg)?;
        let group_tokens: usize = group.trajectories.iter().map(|t| t.tokens.len()).sum();

        for (i, traj) in group.trajectories.iter().enumerate() {
            let a_hat = adv[i];
            let l = traj.tokens.len();
            match traj.origin {
                Origin::OnPolicy => {
                    m_reward_on.push(traj.reward);
                    m_adv_on.push(a_hat.abs());
                }
                Origin::Expert => {
                    m_reward_exp.push(traj.reward);
                    m_adv_exp.push(a_hat.abs());
                    m_mask.push(if cfg.filtering { traj.reward } else { 1.0 });
                }
            }
            if l == 0 {
                continue;
            }
            // 1/(G |o_i|) nesting for the GRPO family, 1/sum|o_i| for DAPO;
            // both averaged over the surviving groups
            let norm = if dapo {
                1.0 / (n_groups * group_tokens as f64)
            } else {
                1.0 / (n_groups * group.len() as f64 * l as f64)
            };
            let ctxs = contexts_for(policy, traj, group);
            let tc = &mut coeffs[i].tokens;

            // surrogate terms and clip gates
            let mut flows = vec![false; l];
            for t in 0..l {
                let r = tc[t].r_tilde;
                let clipped_r = r.clamp(lo, hi);
                surrogate += norm * f64::min(r * a_hat, clipped_r * a_hat);
                flows[t] = if a_hat > 0.0 {
                    r <= hi
                } else if a_hat < 0.0 {
                    r >= lo
                } else {
                    false
                };
                tc[t].clipped = a_hat != 0.0 && !flows[t];
                match traj.origin {
                    Origin::OnPolicy => clip_on.push(tc[t].clipped as u8 as f64),
                    Origin::Expert => {
                        clip_exp.push(tc[t].clipped as u8 as f64);
                        m_w.push(tc[t].weight.unwrap());
                    }
                }
            }

            if a_hat != 0.0 {
                match traj.origin {
                    Origin::OnPolicy => {
                        for t in 0..l {
                            if flows[t] {
                                // d/dtheta (r~ A) = A r~ grad_logp; negate for the loss
                                let scale = -norm * a_hat * tc[t].r_tilde;
                                policy.accum_grad_log_prob(&ctxs[t], traj.tokens[t], scale, &mut grad);
                            }
                        }
                    }
                    Origin::Expert => {
                        let mask = tc[0].mask.unwrap_or(1.0);
                        if mask != 0.0 {
                            // a_t multiplies d r~_t / d theta in the loss gradient
                            let a: Vec<f64> = (0..l)
                                .map(|t| if flows[t] { -norm * a_hat } else { 0.0 })
                                .collect();
                            // direct part: m w rho grad_logp
                            for t in 0..l {
                                let scale =
                                    a[t] * mask * tc[t].weight.unwrap() * tc[t].rho.unwrap();
                                policy.accum_grad_log_prob(&ctxs[t], traj.tokens[t], scale, &mut grad);
                            }
                            // cross part: the weight depends on every token's
                            // logp through the within-trajectory normalization
                            if cfg.reweighting && !cfg.detach_weight && cfg.beta != 0.0 {
                                let deltas: Vec<f64> = (0..l).map(|t| tc[t].delta.unwrap()).collect();
                                let mean = deltas.iter().sum::<f64>() / l as f64;
                                let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>()
                                    / l as f64;
                                let sigma = var.sqrt();
                                let sp = sigma + cfg.eps_std;
                                let d: Vec<f64> = deltas.iter().map(|x| x - mean).collect();
                                let u: Vec<f64> = (0..l)
                                    .map(|t| {
                                        let w = tc[t].weight.unwrap();
                                        a[t] * mask * tc[t].rho.unwrap() * cfg.beta * w * (1.0 - w)
                                    })
                                    .collect();
                                let u_sum: f64 = u.iter().sum();
                                let ud_sum: f64 = u.iter().zip(&d).map(|(x, y)| x * y).sum();
                                for s in 0..l {
                                    let mut c = u[s] / sp - u_sum / (l as f64 * sp);
                                    if sigma > 0.0 {
                                        c -= ud_sum * d[s] / (l as f64 * sigma * sp * sp);
                                    }
                                    policy.accum_grad_log_prob(
                                        &ctxs[s],
                                        traj.tokens[s],
                                        -c,
                                        &mut grad,
                                    );
                                }
                            }
                        }
                    }
                }
            }

            // exact per-token KL(pi_theta || pi_ref), summed over the vocab
            if use_kl {
                for ctx in &ctxs {
                    let la = policy.log_probs(ctx);
                    let lb = reference.log_probs(ctx);
                    let coeffs: Vec<f64> = la
                        .iter()
                        .zip(&lb)
                        .map(|(&av, &bv)| av.exp() * (av - bv))
                        .collect();
                    kl_sum += coeffs.iter().sum::<f64>();
                    policy.accum_grad_log_probs_weighted(ctx, &coeffs, &mut kl_grad);
                }
            }
            n_tok_total += l;
        }
    }

    let mut loss = -surrogate;
    let mut kl_value = 0.0;
    if use_kl && n_tok_total > 0 {
        kl_value = kl_sum / n_tok_total as f64;
        loss += cfg.kl_coeff * kl_value;
        let s = cfg.kl_coeff / n_tok_total as f64;
        for (g, k) in grad.iter_mut().zip(&kl_grad) {
            *g += s * k;
        }
    }

    let metrics = BatchMetrics {
        loss,
        reward_on: m_reward_on.value(),
        reward_exp: m_reward_exp.value(),
        adv_abs_on: m_adv_on.value(),
        adv_abs_exp: m_adv_exp.value(),
        mean_w: m_w.value(),
        mask_rate: m_mask.value(),
        clip_frac_on: clip_on.value(),
        clip_frac_exp: clip_exp.value(),
        kl: kl_value,
        skipped_groups,
        total_groups: groups.len(),
    };
    Ok(LossOutcome::Evaluated { loss, grad, metrics })
}
