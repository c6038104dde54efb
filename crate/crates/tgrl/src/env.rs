//! Synthetic verifiable two-stage tasks.
//!
//! An instance hides a short symbol vector (the "image") behind an
//! observation encoding and asks a query about it. A well-formed response
//! first describes the cells (perception segment, ended by SEP), then
//! derives the answer (reasoning segment: evidence token, ANS, answer,
//! EOS). A binary verifier checks the extracted answer; a hand-coded
//! stochastic expert produces reference trajectories with exact per-token
//! log-probabilities.
//!
//! Everything here is a pure seeded function, so workers with disjoint
//! seeds can generate instances and expert rollouts in parallel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{SeqPolicy, Token, Vocab};

/// What the query asks about the hidden cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Query {
    /// Report the symbol in cell `index`.
    Point { index: usize },
    /// Report the most frequent symbol (instances are generated with a
    /// unique mode).
    Majority,
    /// Is the count of `symbol` even or odd?
    Parity { symbol: u16 },
}

impl Query {
    fn type_id(&self) -> u16 {
        match self {
            Query::Point { .. } => 0,
            Query::Majority => 1,
            Query::Parity { .. } => 2,
        }
    }

    fn arg(&self) -> u16 {
        match self {
            Query::Point { index } => *index as u16,
            Query::Majority => 0,
            Query::Parity { symbol } => *symbol,
        }
    }
}

/// Relative sampling weights for the three query types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryMix {
    pub point: f64,
    pub majority: f64,
    pub parity: f64,
}

impl QueryMix {
    pub fn uniform() -> Self {
        QueryMix {
            point: 1.0,
            majority: 1.0,
            parity: 1.0,
        }
    }

    pub fn point_only() -> Self {
        QueryMix {
            point: 1.0,
            majority: 0.0,
            parity: 0.0,
        }
    }
}

/// Environment configuration: cell count K, symbol alphabet size S, the
/// token vocabulary size (may exceed the used alphabet), length budget,
/// query mix, and the policy context window length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub cells: usize,
    pub symbols: u16,
    pub vocab_size: u16,
    pub max_len: usize,
    pub query_mix: QueryMix,
    pub context_window: usize,
}

impl EnvConfig {
    /// Default task: K=4 cells over 6 symbols, all query types.
    pub fn standard() -> Self {
        EnvConfig {
            cells: 4,
            symbols: 6,
            vocab_size: 12,
            max_len: 16,
            query_mix: QueryMix::uniform(),
            context_window: 4,
        }
    }

    /// Reward-sparse preset: POINT queries over 10 symbols with a padded
    /// vocabulary, so an untrained policy essentially never stumbles on a
    /// rewarded trajectory.
    pub fn needle() -> Self {
        EnvConfig {
            cells: 2,
            symbols: 10,
            vocab_size: 64,
            max_len: 12,
            query_mix: QueryMix::point_only(),
            context_window: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 {
            return Err(Error::Config("env.cells must be >= 1".into()));
        }
        if self.symbols < 2 {
            return Err(Error::Config("env.symbols must be >= 2".into()));
        }
        Vocab::new(self.symbols, self.vocab_size)
            .map_err(|_| Error::Config(format!(
                "env.vocab_size must be >= symbols + 6 = {}, got {}",
                self.symbols + 6,
                self.vocab_size
            )))?;
        // a complete response is K perception tokens + SEP + evidence + ANS + answer + EOS
        if self.max_len < self.cells + 5 {
            return Err(Error::Config(format!(
                "env.max_len must be >= cells + 5 = {}, got {}",
                self.cells + 5,
                self.max_len
            )));
        }
        let m = &self.query_mix;
        if m.point < 0.0 || m.majority < 0.0 || m.parity < 0.0 {
            return Err(Error::Config("env.query_mix weights must be >= 0".into()));
        }
        if m.point + m.majority + m.parity <= 0.0 {
            return Err(Error::Config("env.query_mix weights must not all be zero".into()));
        }
        if self.context_window == 0 {
            return Err(Error::Config("env.context_window must be >= 1".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.symbols, self.vocab_size).expect("validated config")
    }

    /// Cardinality of each observation-encoding slot, for one-hot features.
    pub fn obs_dims(&self) -> Vec<u16> {
        let arg_dim = (self.cells as u16).max(self.symbols);
        let mut dims = vec![3, arg_dim];
        dims.extend(std::iter::repeat(self.symbols).take(self.cells));
        dims
    }
}

/// One verifiable problem: hidden cells, a query, the ground-truth answer
/// token, and the integer observation encoding handed to policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub cells: Vec<u16>,
    pub query: Query,
    pub ground_truth: Token,
    pub encoding: Vec<u16>,
}

/// The symbol that occurs strictly more often than every other, if any.
fn unique_mode(cells: &[u16], symbols: u16) -> Option<u16> {
    let mut counts = vec![0usize; symbols as usize];
    for &c in cells {
        counts[c as usize] += 1;
    }
    let best = *counts.iter().max().unwrap();
    let mut modes = counts.iter().enumerate().filter(|(_, &c)| c == best);
    let (m, _) = modes.next().unwrap();
    if modes.next().is_none() {
        Some(m as u16)
    } else {
        None
    }
}

/// Ground truth as a deterministic function of (cells, query).
pub fn ground_truth(cells: &[u16], query: &Query, vocab: Vocab) -> Token {
    match query {
        Query::Point { index } => cells[*index],
        Query::Majority => {
            unique_mode(cells, vocab.symbols()).expect("majority instances have a unique mode")
        }
        Query::Parity { symbol } => {
            let count = cells.iter().filter(|&&c| c == *symbol).count();
            if count % 2 == 0 {
                vocab.even()
            } else {
                vocab.odd()
            }
        }
    }
}

/// Generate one task instance. MAJORITY cell vectors are resampled until
/// the mode is unique.
pub fn generate_instance<R: Rng>(rng: &mut R, cfg: &EnvConfig) -> Result<TaskInstance> {
    cfg.validate()?;
    let vocab = cfg.vocab();
    let id = rng.gen::<u64>();
    let m = &cfg.query_mix;
    let total = m.point + m.majority + m.parity;
    let u = rng.gen::<f64>() * total;
    let query = if u < m.point {
        Query::Point {
            index: rng.gen_range(0..cfg.cells),
        }
    } else if u < m.point + m.majority {
        Query::Majority
    } else {
        Query::Parity {
            symbol: rng.gen_range(0..cfg.symbols),
        }
    };
    let cells = loop {
        let cells: Vec<u16> = (0..cfg.cells).map(|_| rng.gen_range(0..cfg.symbols)).collect();
        if !matches!(query, Query::Majority) || unique_mode(&cells, cfg.symbols).is_some() {
            break cells;
        }
    };
    let ground_truth = ground_truth(&cells, &query, vocab);
    let mut encoding = vec![query.type_id(), query.arg()];
    encoding.extend_from_slice(&cells);
    Ok(TaskInstance {
        id,
        cells,
        query,
        ground_truth,
        encoding,
    })
}

/// Perception/reasoning split of a token sequence at the first SEP.
/// The SEP token is the last token of the perception span; when no SEP was
/// emitted the whole sequence counts as perception and the reasoning span
/// is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpans {
    pub sep: Option<usize>,
    pub len: usize,
}

impl SegmentSpans {
    pub fn from_tokens(tokens: &[Token], vocab: Vocab) -> Self {
        SegmentSpans {
            sep: tokens.iter().position(|&t| t == vocab.sep()),
            len: tokens.len(),
        }
    }

    /// Perception span, inclusive of SEP.
    pub fn perception_range(&self) -> std::ops::Range<usize> {
        0..self.sep.map(|s| s + 1).unwrap_or(self.len)
    }

    pub fn reasoning_range(&self) -> std::ops::Range<usize> {
        self.sep.map(|s| s + 1).unwrap_or(self.len)..self.len
    }
}

/// Extraction function g(.): the single token immediately after the last
/// ANS, provided it is directly followed by EOS. Anything else yields NONE.
pub fn extract_prediction(tokens: &[Token], vocab: Vocab) -> Option<Token> {
    let i = tokens.iter().rposition(|&t| t == vocab.ans())?;
    match (tokens.get(i + 1), tokens.get(i + 2)) {
        (Some(&pred), Some(&next)) if next == vocab.eos() => Some(pred),
        _ => None,
    }
}

/// Binary verifier: 1 iff the extracted prediction equals the ground
/// truth; a missing prediction scores 0.
pub fn verify(prediction: Option<Token>, y: Token) -> f64 {
    match prediction {
        Some(p) if p == y => 1.0,
        _ => 0.0,
    }
}

/// Fraction of the first K perception tokens that equal the corresponding
/// hidden cell symbols. Missing positions score 0; reasoning-span content
/// is ignored.
pub fn perception_reward(tokens: &[Token], spans: &SegmentSpans, instance: &TaskInstance) -> f64 {
    let k = instance.cells.len();
    let perc_end = spans.sep.unwrap_or(spans.len); // exclude SEP itself
    let matches = (0..k)
        .filter(|&i| i < perc_end && tokens[i] == instance.cells[i])
        .count();
    matches as f64 / k as f64
}

/// Stochastic hand-coded expert: per stage it errs with probability
/// `error_rate`, uniformly over the wrong choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub error_rate: f64,
}

impl ExpertSpec {
    pub fn new(error_rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&error_rate) {
            return Err(Error::Config(format!(
                "expert.error_rate must be in [0, 1), got {error_rate}"
            )));
        }
        Ok(ExpertSpec { error_rate })
    }
}

/// Expert as a sequential policy over the full generated prefix.
///
/// Emission schedule for K cells:
/// positions 0..K    perception tokens (cell i correct w.p. 1-eta, else
///                   uniform over the wrong symbols),
/// K                 SEP (forced),
/// K+1               evidence token derived from the expert's OWN emitted
///                   perception tokens (forced),
/// K+2               ANS (forced),
/// K+3               answer (the derived answer w.p. 1-eta, else uniform
///                   over the wrong answers in the query's answer domain),
/// K+4               EOS (forced).
///
/// An expert that mis-perceived therefore reasons consistently from its
/// own wrong perception; its failure is an internally coherent failed path.
#[derive(Debug, Clone, Copy)]
pub struct ExpertPolicy {
    pub spec: ExpertSpec,
    pub vocab: Vocab,
}

impl ExpertPolicy {
    /// Evidence and answer derived from the expert's own perception tokens.
    fn derive(&self, instance: &TaskInstance, perception: &[Token]) -> (Token, Token) {
        let v = self.vocab;
        match instance.query {
            Query::Point { index } => {
                let t = perception[index];
                (t, t)
            }
            Query::Majority => {
                // ties broken toward the smallest symbol so the procedure
                // stays deterministic on noisy perception
                let mut counts = vec![0usize; v.symbols() as usize];
                for &p in perception {
                    if v.is_symbol(p) {
                        counts[p as usize] += 1;
                    }
                }
                let best = *counts.iter().max().unwrap();
                let t = counts.iter().position(|&c| c == best).unwrap() as Token;
                (t, t)
            }
            Query::Parity { symbol } => {
                let count = perception.iter().filter(|&&p| p == symbol).count();
                let t = if count % 2 == 0 { v.even() } else { v.odd() };
                (t, t)
            }
        }
    }

    /// Answer domain for the query type.
    fn answer_domain(&self, instance: &TaskInstance) -> Vec<Token> {
        match instance.query {
            Query::Point { .. } | Query::Majority => (0..self.vocab.symbols()).collect(),
            Query::Parity { .. } => vec![self.vocab.even(), self.vocab.odd()],
        }
    }
}

fn forced(vocab_size: u16, token: Token) -> Vec<f64> {
    let mut lp = vec![f64::NEG_INFINITY; vocab_size as usize];
    lp[token as usize] = 0.0;
    lp
}

fn noisy(vocab_size: u16, domain: &[Token], correct: Token, eta: f64) -> Vec<f64> {
    let mut lp = vec![f64::NEG_INFINITY; vocab_size as usize];
    let wrong = (domain.len() - 1) as f64;
    for &t in domain {
        lp[t as usize] = if t == correct {
            (1.0 - eta).ln()
        } else {
            (eta / wrong).ln()
        };
    }
    lp
}

impl SeqPolicy for ExpertPolicy {
    fn next_log_probs(&self, instance: &TaskInstance, prefix: &[Token]) -> Vec<f64> {
        let v = self.vocab;
        let k = instance.cells.len();
        let eta = self.spec.error_rate;
        let t = prefix.len();
        if t < k {
            let domain: Vec<Token> = (0..v.symbols()).collect();
            noisy(v.size(), &domain, instance.cells[t], eta)
        } else if t == k {
            forced(v.size(), v.sep())
        } else if t == k + 1 {
            let (evidence, _) = self.derive(instance, &prefix[..k]);
            forced(v.size(), evidence)
        } else if t == k + 2 {
            forced(v.size(), v.ans())
        } else if t == k + 3 {
            let (_, derived) = self.derive(instance, &prefix[..k]);
            noisy(v.size(), &self.answer_domain(instance), derived, eta)
        } else {
            forced(v.size(), v.eos())
        }
    }
}

/// Sample one expert trajectory with exact per-token expert log-probs.
pub fn expert_rollout<R: Rng>(
    spec: ExpertSpec,
    instance: &TaskInstance,
    cfg: &EnvConfig,
    rng: &mut R,
) -> crate::rollout::Trajectory {
    let policy = ExpertPolicy {
        spec,
        vocab: cfg.vocab(),
    };
    crate::rollout::sample_trajectory(&policy, instance, cfg, crate::rollout::Origin::Expert, rng)
}
