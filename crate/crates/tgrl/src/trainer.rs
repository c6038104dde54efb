//! Training loop: sample rollout groups from a frozen snapshot, evaluate
//! the surrogate loss and its exact gradient, apply an optimizer step, and
//! periodically refresh the snapshot and run a greedy evaluation.
//!
//! Everything is seeded through one base seed; two runs with identical
//! configs produce bit-identical parameter trajectories and metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{generate_instance, EnvConfig, ExpertSpec, TaskInstance};
use crate::error::{Error, Result};
use crate::objective::{loss_and_grad, BatchMetrics, LossOutcome, ObjectiveConfig};
use crate::policy::{PolicyParams, SeqPolicy, Token};
use crate::rollout::{derive_seed, sample_group, DumpRecord, Expert, RolloutGroup};

/// First-order optimizer choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer accumulators (Adam moments; empty for SGD).
#[derive(Debug, Clone)]
pub struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl OptState {
    pub fn new(n_params: usize, opt: &Optimizer) -> Self {
        match opt {
            Optimizer::Sgd => OptState {
                m: Vec::new(),
                v: Vec::new(),
                t: 0,
            },
            Optimizer::Adam { .. } => OptState {
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
        }
    }

    /// One in-place parameter update from a gradient.
    pub fn step(&mut self, opt: &Optimizer, lr: f64, theta: &mut [f64], grad: &[f64]) {
        match *opt {
            Optimizer::Sgd => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..theta.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimizer steps (skipped batches still consume a step).
    pub steps: usize,
    /// Task instances (one rollout group each) per step.
    pub groups_per_step: usize,
    /// On-policy members per group.
    pub n_on: usize,
    /// Expert members per group.
    pub n_off: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Refresh the sampling snapshot after this many applied updates.
    pub updates_per_snapshot: usize,
    /// Greedy evaluation cadence in steps; 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Size of the fixed held-out evaluation instance set.
    pub eval_instances: usize,
    /// Expert perception / answer corruption probability.
    pub expert_error_rate: f64,
    /// Draw expert members from a fixed per-instance pool of this size
    /// instead of fresh samples.
    pub expert_cache_pool: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn defaults() -> Self {
        TrainConfig {
            steps: 500,
            groups_per_step: 8,
            n_on: 7,
            n_off: 1,
            lr: 0.05,
            optimizer: Optimizer::adam_default(),
            updates_per_snapshot: 1,
            eval_every: 50,
            eval_instances: 200,
            expert_error_rate: 0.02,
            expert_cache_pool: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be > 0".into()));
        }
        if self.groups_per_step == 0 {
            return Err(Error::Config("train.groups_per_step must be > 0".into()));
        }
        if self.n_on + self.n_off < 2 {
            return Err(Error::Config(
                "train.n_on + train.n_off must be >= 2".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive and finite".into()));
        }
        if self.updates_per_snapshot == 0 {
            return Err(Error::Config("train.updates_per_snapshot must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.expert_error_rate) {
            return Err(Error::Config(
                "train.expert_error_rate must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One metrics line, emitted per step (JSONL-friendly).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    /// Greedy accuracy on the held-out set; only on evaluation steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_acc: Option<f64>,
    pub reward_on: f64,
    pub reward_exp: f64,
    pub mask_rate: f64,
    pub mean_w: f64,
    pub clip_frac_on: f64,
    pub clip_frac_exp: f64,
    pub kl: f64,
    pub skipped: bool,
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyParams,
    pub history: Vec<StepMetrics>,
    /// Greedy accuracy on the held-out set at the end of training.
    pub final_eval: f64,
    pub skipped_steps: usize,
}

/// Greedy argmax rollout, stopping at EOS or the length cap.
pub fn greedy_rollout<P: SeqPolicy + ?Sized>(
    policy: &P,
    instance: &TaskInstance,
    env: &EnvConfig,
) -> Vec<Token> {
    let vocab = env.vocab();
    let mut tokens: Vec<Token> = Vec::new();
    while tokens.len() < env.max_len {
        let lp = policy.next_log_probs(instance, &tokens);
        let tok = lp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i as Token)
            .unwrap();
        tokens.push(tok);
        if tok == vocab.eos() {
            break;
        }
    }
    tokens
}

/// Mean verified reward of greedy rollouts over an instance set.
pub fn evaluate<P: SeqPolicy + ?Sized>(
    policy: &P,
    instances: &[TaskInstance],
    env: &EnvConfig,
) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let vocab = env.vocab();
    let total: f64 = instances
        .iter()
        .map(|inst| {
            let tokens = greedy_rollout(policy, inst, env);
            let pred = crate::env::extract_prediction(&tokens, vocab);
            crate::env::verify(pred, inst.ground_truth)
        })
        .sum();
    total / instances.len() as f64
}

/// Fixed held-out instance set derived from the run seed.
pub fn eval_instances(env: &EnvConfig, n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX - 1));
    (0..n).map(|_| generate_instance(&mut rng, env)).collect()
}

fn non_finite_dump(step: usize, loss: f64, groups: &[RolloutGroup], policy: &PolicyParams) -> String {
    let records: Vec<Vec<DumpRecord>> = groups
        .iter()
        .map(|g| DumpRecord::from_group(g, Some(policy)))
        .collect();
    serde_json::json!({
        "step": step,
        "loss": loss,
        "groups": records,
    })
    .to_string()
}

/// Run the full loop. `sink` sees every metrics line as it is produced.
pub fn train(
    mut policy: PolicyParams,
    env: &EnvConfig,
    obj: &ObjectiveConfig,
    tc: &TrainConfig,
    mut sink: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    env.validate()?;
    obj.validate()?;
    tc.validate()?;
    if tc.n_off > 0 && !(0.0..1.0).contains(&tc.expert_error_rate) {
        return Err(Error::Config("train.expert_error_rate must be in [0, 1)".into()));
    }

    let reference = policy.clone();
    let mut snapshot = policy.clone();
    let expert = Expert::from_spec(ExpertSpec::new(tc.expert_error_rate)?, env);
    let held_out = eval_instances(env, tc.eval_instances, tc.seed)?;
    let mut opt_state = OptState::new(policy.theta.len(), &tc.optimizer);

    let mut history = Vec::with_capacity(tc.steps);
    let mut skipped_steps = 0usize;
    let mut applied_updates = 0usize;

    for step in 0..tc.steps {
        // catch corrupted parameters before sampling garbage from them
        if let Some(i) = policy.theta.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                step,
                what: format!("parameter {i} is non-finite at step start"),
                dump: serde_json::json!({ "step": step, "param_index": i }).to_string(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, step as u64));
        let groups: Vec<RolloutGroup> = (0..tc.groups_per_step)
            .map(|_| {
                let inst = generate_instance(&mut rng, env)?;
                sample_group(
                    &snapshot,
                    &expert,
                    &inst,
                    tc.n_on,
                    tc.n_off,
                    env,
                    tc.expert_cache_pool,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;

        let outcome = loss_and_grad(&groups, &policy, &reference, obj)?;
        let (metrics, skipped) = match outcome {
            LossOutcome::Skipped => {
                skipped_steps += 1;
                (BatchMetrics::default(), true)
            }
            LossOutcome::Evaluated { loss, grad, metrics } => {
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    let what = if loss.is_finite() {
                        "gradient contains a non-finite entry"
                    } else {
                        "loss is non-finite"
                    };
                    return Err(Error::NonFinite {
                        step,
                        what: what.into(),
                        dump: non_finite_dump(step, loss, &groups, &policy),
                    });
                }
                opt_state.step(&tc.optimizer, tc.lr, &mut policy.theta, &grad);
                if policy.theta.iter().any(|p| !p.is_finite()) {
                    return Err(Error::NonFinite {
                        step,
                        what: "parameters went non-finite after the update".into(),
                        dump: non_finite_dump(step, loss, &groups, &policy),
                    });
                }
                applied_updates += 1;
                if applied_updates % tc.updates_per_snapshot == 0 {
                    snapshot = policy.clone();
                }
                (metrics, false)
            }
        };

        let eval_acc = if tc.eval_every > 0
            && (step % tc.eval_every == 0 || step + 1 == tc.steps)
        {
            Some(evaluate(&policy, &held_out, env))
        } else {
            None
        };
        let line = StepMetrics {
            step,
            loss: metrics.loss,
            eval_acc,
            reward_on: metrics.reward_on,
            reward_exp: metrics.reward_exp,
            mask_rate: metrics.mask_rate,
            mean_w: metrics.mean_w,
            clip_frac_on: metrics.clip_frac_on,
            clip_frac_exp: metrics.clip_frac_exp,
            kl: metrics.kl,
            skipped,
        };
        sink(&line);
        history.push(line);
    }

    let final_eval = evaluate(&policy, &held_out, env);
    Ok(TrainOutcome {
        policy,
        history,
        final_eval,
        skipped_steps,
    })
}
