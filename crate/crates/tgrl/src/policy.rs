//! Differentiable conditional token distributions.
//!
//! Two architectures are provided: a tabular softmax (one logit row per
//! hashed context bucket) whose gradients have simple closed forms, and a
//! one-hidden-layer tanh network over one-hot context features. Both expose
//! exact log-probabilities, seeded sampling, and exact parameter gradients
//! in 64-bit arithmetic.
//!
//! Policies are plain immutable values; rollout workers may evaluate them
//! concurrently while the trainer owns the single mutable copy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::TaskInstance;
use crate::error::{Error, Result};

/// Token id. Small vocabularies only; `u16` is plenty.
pub type Token = u16;

/// Token alphabet: `symbols` environment symbols followed by the fixed
/// special tokens EVEN, ODD, SEP, ANS, EOS, PAD. `size` may exceed the
/// used alphabet (spare ids are never emitted by the environment, which
/// makes random exploration sparser).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: Token,
    symbols: Token,
}

impl Vocab {
    pub fn new(symbols: Token, size: Token) -> Result<Self> {
        if symbols < 2 {
            return Err(Error::Config(format!(
                "vocab: symbols must be >= 2, got {symbols}"
            )));
        }
        if size < symbols + 6 {
            return Err(Error::Config(format!(
                "vocab: size must be >= symbols + 6 = {}, got {size}",
                symbols + 6
            )));
        }
        Ok(Vocab { size, symbols })
    }

    pub fn size(&self) -> Token {
        self.size
    }

    pub fn symbols(&self) -> Token {
        self.symbols
    }

    /// Answer token for an even parity count.
    pub fn even(&self) -> Token {
        self.symbols
    }

    /// Answer token for an odd parity count.
    pub fn odd(&self) -> Token {
        self.symbols + 1
    }

    /// Ends the perception segment.
    pub fn sep(&self) -> Token {
        self.symbols + 2
    }

    /// Precedes the final answer token.
    pub fn ans(&self) -> Token {
        self.symbols + 3
    }

    /// Ends the trajectory.
    pub fn eos(&self) -> Token {
        self.symbols + 4
    }

    /// Left-padding for short context windows.
    pub fn pad(&self) -> Token {
        self.symbols + 5
    }

    pub fn is_symbol(&self, t: Token) -> bool {
        t < self.symbols
    }
}

/// Conditioning for one generation step: the instance observation encoding
/// plus a fixed-length window of the most recent generated tokens,
/// left-padded with PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub obs: Vec<u16>,
    pub window: Vec<Token>,
}

impl Context {
    pub fn from_prefix(obs: &[u16], prefix: &[Token], window_len: usize, pad: Token) -> Self {
        let mut window = vec![pad; window_len];
        let n = prefix.len().min(window_len);
        window[window_len - n..].copy_from_slice(&prefix[prefix.len() - n..]);
        Context {
            obs: obs.to_vec(),
            window,
        }
    }
}

/// Architecture descriptor. Parameter vector length is a deterministic
/// function of this descriptor plus vocab size and window length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// One logit row per hashed (observation, window) bucket.
    Tabular { buckets: usize },
    /// One-hot context features -> tanh hidden layer -> logits.
    /// `obs_dims[i]` is the cardinality of observation slot `i`; an empty
    /// list is filled in from the environment at validation time.
    Mlp {
        hidden: usize,
        #[serde(default)]
        obs_dims: Vec<u16>,
    },
}

/// A complete policy: architecture, vocab, context window length, and the
/// flat parameter vector theta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub arch: Arch,
    pub vocab: Vocab,
    pub window: usize,
    pub theta: Vec<f64>,
}

fn fnv1a(obs: &[u16], window: &[Token]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |x: u16| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for &x in obs {
        eat(x);
    }
    eat(0xffff); // separator so (obs, window) boundaries are unambiguous
    for &x in window {
        eat(x);
    }
    h
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

impl PolicyParams {
    /// Number of parameters implied by the descriptor.
    pub fn param_len(arch: &Arch, vocab: Vocab, window: usize) -> usize {
        let v = vocab.size() as usize;
        match arch {
            Arch::Tabular { buckets } => buckets * v,
            Arch::Mlp { hidden, obs_dims } => {
                let d = obs_dims.iter().map(|&c| c as usize).sum::<usize>() + window * v;
                hidden * d + hidden + v * hidden + v
            }
        }
    }

    /// Fresh policy: zeros for tabular, symmetric uniform in [-0.1, 0.1]
    /// for the mlp (seed-controlled). Both start near the uniform token
    /// distribution.
    pub fn init(arch: Arch, vocab: Vocab, window: usize, seed: u64) -> Result<Self> {
        match &arch {
            Arch::Tabular { buckets } => {
                if *buckets == 0 {
                    return Err(Error::Config("arch.buckets must be >= 1".into()));
                }
            }
            Arch::Mlp { hidden, obs_dims } => {
                if *hidden == 0 {
                    return Err(Error::Config("arch.hidden must be >= 1".into()));
                }
                if obs_dims.iter().any(|&c| c == 0) {
                    return Err(Error::Config("arch.obs_dims entries must be >= 1".into()));
                }
            }
        }
        let n = Self::param_len(&arch, vocab, window);
        let theta = match &arch {
            Arch::Tabular { .. } => vec![0.0; n],
            Arch::Mlp { .. } => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
            }
        };
        Ok(PolicyParams {
            arch,
            vocab,
            window,
            theta,
        })
    }

    fn mlp_dims(&self) -> (usize, usize) {
        match &self.arch {
            Arch::Mlp { hidden, obs_dims } => {
                let d = obs_dims.iter().map(|&c| c as usize).sum::<usize>()
                    + self.window * self.vocab.size() as usize;
                (*hidden, d)
            }
            _ => unreachable!(),
        }
    }

    /// Indices of the active one-hot features for an mlp context.
    fn active_features(&self, ctx: &Context) -> Vec<usize> {
        let Arch::Mlp { obs_dims, .. } = &self.arch else {
            unreachable!()
        };
        assert_eq!(ctx.obs.len(), obs_dims.len(), "obs encoding length mismatch");
        assert_eq!(ctx.window.len(), self.window, "window length mismatch");
        let v = self.vocab.size() as usize;
        let mut idx = Vec::with_capacity(ctx.obs.len() + self.window);
        let mut off = 0usize;
        for (i, &x) in ctx.obs.iter().enumerate() {
            assert!(x < obs_dims[i], "obs slot {i} out of range");
            idx.push(off + x as usize);
            off += obs_dims[i] as usize;
        }
        for &t in &ctx.window {
            idx.push(off + t as usize);
            off += v;
        }
        idx
    }

    fn tabular_row(&self, ctx: &Context) -> usize {
        let Arch::Tabular { buckets } = &self.arch else {
            unreachable!()
        };
        assert_eq!(ctx.window.len(), self.window, "window length mismatch");
        (fnv1a(&ctx.obs, &ctx.window) % *buckets as u64) as usize
    }

    /// Logits over the vocabulary, plus the hidden activations for the mlp
    /// (needed again in the backward pass).
    fn forward(&self, ctx: &Context) -> (Vec<f64>, Option<Vec<f64>>) {
        let v = self.vocab.size() as usize;
        match &self.arch {
            Arch::Tabular { .. } => {
                let row = self.tabular_row(ctx);
                (self.theta[row * v..(row + 1) * v].to_vec(), None)
            }
            Arch::Mlp { .. } => {
                let (h, d) = self.mlp_dims();
                let feats = self.active_features(ctx);
                let (w1, rest) = self.theta.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(v * h);
                let mut hid = vec![0.0; h];
                for (j, hj) in hid.iter_mut().enumerate() {
                    let mut pre = b1[j];
                    for &f in &feats {
                        pre += w1[j * d + f];
                    }
                    *hj = pre.tanh();
                }
                let mut logits = vec![0.0; v];
                for (k, z) in logits.iter_mut().enumerate() {
                    let mut acc = b2[k];
                    for (j, &hj) in hid.iter().enumerate() {
                        acc += w2[k * h + j] * hj;
                    }
                    *z = acc;
                }
                (logits, Some(hid))
            }
        }
    }

    /// Full log-probability distribution at a context.
    pub fn log_probs(&self, ctx: &Context) -> Vec<f64> {
        log_softmax(&self.forward(ctx).0)
    }

    /// Log-probability of one token.
    pub fn log_prob(&self, ctx: &Context, token: Token) -> Result<f64> {
        if token >= self.vocab.size() {
            return Err(Error::Input(format!(
                "token {token} out of range for vocab size {}",
                self.vocab.size()
            )));
        }
        Ok(self.log_probs(ctx)[token as usize])
    }

    /// Draw a token from the categorical at `ctx`. Returns the token and
    /// its log-probability; reproducible per rng state.
    pub fn sample_token<R: Rng>(&self, ctx: &Context, rng: &mut R) -> (Token, f64) {
        let lp = self.log_probs(ctx);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (t, &l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return (t as Token, l);
            }
        }
        // Rounding pushed the cumulative sum just below 1; take the last token.
        let t = lp.len() - 1;
        (t as Token, lp[t])
    }

    /// Accumulate `scale * d log_prob(token) / d theta` into `out`.
    ///
    /// This is the workhorse for every gradient in the crate: all losses are
    /// linear combinations of per-token score vectors, so consumers scatter
    /// scaled scores instead of materializing dense per-token gradients.
    pub fn accum_grad_log_prob(&self, ctx: &Context, token: Token, scale: f64, out: &mut [f64]) {
        if scale == 0.0 {
            assert_eq!(out.len(), self.theta.len());
            return;
        }
        let v = self.vocab.size() as usize;
        let lp = self.log_probs(ctx);
        let mut dz = vec![0.0; v];
        for k in 0..v {
            dz[k] = scale * (((k == token as usize) as u8 as f64) - lp[k].exp());
        }
        self.accum_from_logit_grad(ctx, &dz, out);
    }

    /// Accumulate `sum_v coeffs[v] * grad log p(v | ctx)` in one backward
    /// pass. Equivalent to calling `accum_grad_log_prob` per vocab entry
    /// but a vocab-size factor cheaper; used by the KL penalty gradient.
    pub fn accum_grad_log_probs_weighted(&self, ctx: &Context, coeffs: &[f64], out: &mut [f64]) {
        let v = self.vocab.size() as usize;
        assert_eq!(coeffs.len(), v);
        let lp = self.log_probs(ctx);
        let total: f64 = coeffs.iter().sum();
        // sum_v c_v (onehot_v - p) collapses to c - (sum c) p in logit space
        let mut dz = vec![0.0; v];
        for k in 0..v {
            dz[k] = coeffs[k] - total * lp[k].exp();
        }
        self.accum_from_logit_grad(ctx, &dz, out);
    }

    /// Scatter a logit-space gradient through the network into `out`.
    fn accum_from_logit_grad(&self, ctx: &Context, dz: &[f64], out: &mut [f64]) {
        assert_eq!(out.len(), self.theta.len());
        let v = self.vocab.size() as usize;
        match &self.arch {
            Arch::Tabular { .. } => {
                let row = self.tabular_row(ctx);
                let base = row * v;
                for k in 0..v {
                    out[base + k] += dz[k];
                }
            }
            Arch::Mlp { .. } => {
                let (_, hid) = self.forward(ctx);
                let (h, d) = self.mlp_dims();
                let hid = hid.unwrap();
                let feats = self.active_features(ctx);
                let (w1_off, b1_off) = (0, h * d);
                let (w2_off, b2_off) = (h * d + h, h * d + h + v * h);
                let w2 = &self.theta[w2_off..b2_off];
                let mut dh = vec![0.0; h];
                for k in 0..v {
                    let dzk = dz[k];
                    out[b2_off + k] += dzk;
                    for j in 0..h {
                        out[w2_off + k * h + j] += dzk * hid[j];
                        dh[j] += w2[k * h + j] * dzk;
                    }
                }
                for j in 0..h {
                    let dpre = dh[j] * (1.0 - hid[j] * hid[j]);
                    out[b1_off + j] += dpre;
                    for &f in &feats {
                        out[w1_off + j * d + f] += dpre;
                    }
                }
            }
        }
    }

    /// Exact gradient of `log_prob(ctx, token)` with respect to theta.
    pub fn grad_log_prob(&self, ctx: &Context, token: Token) -> Result<Vec<f64>> {
        if token >= self.vocab.size() {
            return Err(Error::Input(format!(
                "token {token} out of range for vocab size {}",
                self.vocab.size()
            )));
        }
        let mut g = vec![0.0; self.theta.len()];
        self.accum_grad_log_prob(ctx, token, 1.0, &mut g);
        Ok(g)
    }

    /// Deep copy of the parameters (frozen snapshot).
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    /// Exact categorical KL(self || other) at one context.
    pub fn kl_to(&self, other: &PolicyParams, ctx: &Context) -> Result<f64> {
        if self.arch != other.arch || self.vocab != other.vocab || self.window != other.window {
            return Err(Error::Input(
                "kl_to: architecture or vocab mismatch between policies".into(),
            ));
        }
        let la = self.log_probs(ctx);
        let lb = other.log_probs(ctx);
        Ok(la
            .iter()
            .zip(&lb)
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum())
    }

    /// Write a checkpoint. JSON with shortest-round-trip floats, so the
    /// theta vector survives save/load bit-exactly.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<PolicyParams> {
        let s = std::fs::read_to_string(path)?;
        let p: PolicyParams = serde_json::from_str(&s)?;
        if !p.theta.iter().all(|x| x.is_finite()) {
            return Err(Error::Parse("checkpoint contains non-finite parameters".into()));
        }
        if p.theta.len() != Self::param_len(&p.arch, p.vocab, p.window) {
            return Err(Error::Parse(
                "checkpoint parameter count does not match architecture descriptor".into(),
            ));
        }
        Ok(p)
    }
}

/// Anything that defines a next-token distribution given a task instance
/// and the literal generated prefix. Implemented by learned policies
/// (through their windowed context) and by the hand-coded expert.
pub trait SeqPolicy {
    /// Log-probabilities over the full vocabulary for the next token.
    fn next_log_probs(&self, instance: &TaskInstance, prefix: &[Token]) -> Vec<f64>;
}

impl SeqPolicy for PolicyParams {
    fn next_log_probs(&self, instance: &TaskInstance, prefix: &[Token]) -> Vec<f64> {
        let ctx = Context::from_prefix(&instance.encoding, prefix, self.window, self.vocab.pad());
        self.log_probs(&ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab8() -> Vocab {
        Vocab::new(2, 8).unwrap()
    }

    fn ctx(obs: &[u16], window: &[Token]) -> Context {
        Context {
            obs: obs.to_vec(),
            window: window.to_vec(),
        }
    }

    fn tabular8() -> PolicyParams {
        PolicyParams::init(Arch::Tabular { buckets: 64 }, vocab8(), 4, 0).unwrap()
    }

    fn mlp8(seed: u64) -> PolicyParams {
        PolicyParams::init(
            Arch::Mlp {
                hidden: 6,
                obs_dims: vec![3, 4],
            },
            vocab8(),
            4,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn uniform_tabular_log_prob() {
        let p = tabular8();
        let c = ctx(&[1, 2], &[0, 1, 7, 7]);
        for t in 0..8 {
            let lp = p.log_prob(&c, t).unwrap();
            assert!((lp - (1.0f64 / 8.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scaled_params_match_zero_params() {
        let mut p = mlp8(0);
        let q = {
            let mut q = p.clone();
            q.theta.iter_mut().for_each(|x| *x = 0.0);
            q
        };
        p.theta.iter_mut().for_each(|x| *x *= 0.0);
        let c = ctx(&[0, 3], &[2, 2, 2, 2]);
        assert_eq!(p.log_probs(&c), q.log_probs(&c));
    }

    #[test]
    fn token_out_of_range_is_input_error() {
        let p = tabular8();
        let c = ctx(&[0, 0], &[0, 0, 0, 0]);
        assert!(matches!(p.log_prob(&c, 8), Err(Error::Input(_))));
    }

    /// Independent straightforward re-implementation of the mlp forward
    /// pass, reading theta by explicit index arithmetic.
    fn mlp_forward_oracle(p: &PolicyParams, c: &Context) -> Vec<f64> {
        let Arch::Mlp { hidden, obs_dims } = &p.arch else {
            panic!()
        };
        let v = p.vocab.size() as usize;
        let d = obs_dims.iter().map(|&x| x as usize).sum::<usize>() + p.window * v;
        // dense one-hot input
        let mut x = vec![0.0; d];
        let mut off = 0;
        for (i, &o) in c.obs.iter().enumerate() {
            x[off + o as usize] = 1.0;
            off += obs_dims[i] as usize;
        }
        for &t in &c.window {
            x[off + t as usize] = 1.0;
            off += v;
        }
        let h = *hidden;
        let mut hid = vec![0.0; h];
        for j in 0..h {
            let mut pre = p.theta[h * d + j];
            for i in 0..d {
                pre += p.theta[j * d + i] * x[i];
            }
            hid[j] = pre.tanh();
        }
        let mut logits = vec![0.0; v];
        for k in 0..v {
            let mut z = p.theta[h * d + h + v * h + k];
            for j in 0..h {
                z += p.theta[h * d + h + k * h + j] * hid[j];
            }
            logits[k] = z;
        }
        // naive log-softmax
        let total: f64 = logits.iter().map(|z| z.exp()).sum();
        logits.iter().map(|z| z - total.ln()).collect()
    }

    #[test]
    fn mlp_forward_matches_independent_oracle() {
        let p = mlp8(0);
        let c = ctx(&[2, 1], &[0, 5, 6, 7]);
        let got = p.log_probs(&c);
        let want = mlp_forward_oracle(&p, &c);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn sampling_frequencies_uniform() {
        let p = tabular8();
        let c = ctx(&[0, 1], &[7, 7, 7, 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = [0u32; 8];
        for _ in 0..n {
            let (t, lp) = p.sample_token(&c, &mut rng);
            assert!((lp - (1.0f64 / 8.0).ln()).abs() < 1e-12);
            counts[t as usize] += 1;
        }
        // binomial: mean n/8, sigma = sqrt(n * 1/8 * 7/8)
        let mean = n as f64 / 8.0;
        let sigma = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for &cnt in &counts {
            assert!((cnt as f64 - mean).abs() < 3.0 * sigma, "count {cnt}");
        }
    }

    #[test]
    fn near_degenerate_softmax_dominates() {
        let mut p = tabular8();
        let c = ctx(&[0, 1], &[7, 7, 7, 7]);
        let row = p.tabular_row(&c);
        p.theta[row * 8 + 3] = 50.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..10_000)
            .filter(|_| p.sample_token(&c, &mut rng).0 == 3)
            .count();
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn sampling_deterministic_per_seed() {
        let p = mlp8(3);
        let c = ctx(&[1, 0], &[4, 4, 4, 4]);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(p.sample_token(&c, &mut a), p.sample_token(&c, &mut b));
    }

    #[test]
    fn uniform_tabular_closed_form_gradient() {
        let p = tabular8();
        let c = ctx(&[2, 2], &[1, 0, 1, 0]);
        let row = p.tabular_row(&c);
        let g = p.grad_log_prob(&c, 5).unwrap();
        for k in 0..8usize {
            let want = if k == 5 { 1.0 - 1.0 / 8.0 } else { -1.0 / 8.0 };
            assert!((g[row * 8 + k] - want).abs() < 1e-12);
        }
        let outside: f64 = g
            .iter()
            .enumerate()
            .filter(|(i, _)| *i < row * 8 || *i >= (row + 1) * 8)
            .map(|(_, x)| x.abs())
            .sum();
        assert_eq!(outside, 0.0);
    }

    fn fd_check(p: &PolicyParams, c: &Context, token: Token) {
        let g = p.grad_log_prob(c, token).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let step = 1e-5;
        for _ in 0..20 {
            let i = rng.gen_range(0..p.theta.len());
            let mut plus = p.clone();
            plus.theta[i] += step;
            let mut minus = p.clone();
            minus.theta[i] -= step;
            let fd = (plus.log_prob(c, token).unwrap() - minus.log_prob(c, token).unwrap())
                / (2.0 * step);
            let rel = (g[i] - fd).abs() / f64::max(1e-8, f64::max(g[i].abs(), fd.abs()));
            assert!(rel <= 1e-6, "coord {i}: analytic {} fd {fd}", g[i]);
        }
    }

    #[test]
    fn grad_matches_finite_differences_tabular() {
        let mut p = tabular8();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        p.theta.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        fd_check(&p, &ctx(&[1, 3], &[0, 2, 5, 6]), 2);
    }

    #[test]
    fn grad_matches_finite_differences_mlp() {
        let p = mlp8(5);
        fd_check(&p, &ctx(&[2, 0], &[1, 1, 3, 7]), 6);
    }

    #[test]
    fn expected_score_is_zero() {
        for p in [mlp8(2), tabular8()] {
            let c = ctx(&[1, 1], &[0, 3, 2, 1]);
            let lp = p.log_probs(&c);
            let mut acc = vec![0.0; p.theta.len()];
            for t in 0..p.vocab.size() {
                p.accum_grad_log_prob(&c, t, lp[t as usize].exp(), &mut acc);
            }
            let max = acc.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(max < 1e-10, "max |E[score]| = {max}");
        }
    }

    #[test]
    fn weighted_accumulation_matches_per_token_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for mut p in [mlp8(3), tabular8()] {
            p.theta.iter_mut().for_each(|x| *x += rng.gen_range(-0.5..0.5));
            let c = ctx(&[2, 1], &[4, 0, 7, 3]);
            let coeffs: Vec<f64> = (0..p.vocab.size())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let mut want = vec![0.0; p.theta.len()];
            for (t, &cv) in coeffs.iter().enumerate() {
                p.accum_grad_log_prob(&c, t as Token, cv, &mut want);
            }
            let mut got = vec![0.0; p.theta.len()];
            p.accum_grad_log_probs_weighted(&c, &coeffs, &mut got);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_self_is_zero() {
        let p = mlp8(1);
        let c = ctx(&[0, 2], &[7, 7, 0, 1]);
        assert!(p.kl_to(&p, &c).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_matches_direct_summation() {
        let a = tabular8();
        let mut b = tabular8();
        let c = ctx(&[0, 0], &[7, 7, 7, 7]);
        let row = b.tabular_row(&c);
        b.theta[row * 8 + 2] = 50.0;
        let la = a.log_probs(&c);
        let lb = b.log_probs(&c);
        let direct: f64 = (0..8).map(|t| la[t].exp() * (la[t] - lb[t])).sum();
        assert!((a.kl_to(&b, &c).unwrap() - direct).abs() < 1e-12);
        assert!((b.kl_to(&a, &c).unwrap()
            - (0..8).map(|t| lb[t].exp() * (lb[t] - la[t])).sum::<f64>())
        .abs()
            < 1e-12);
    }

    #[test]
    fn kl_nonnegative_random_pairs() {
        let c = ctx(&[1, 2], &[0, 1, 2, 3]);
        for seed in 0..100 {
            let a = mlp8(seed);
            let b = mlp8(seed + 1000);
            assert!(a.kl_to(&b, &c).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_architecture_mismatch_is_input_error() {
        let a = tabular8();
        let b = mlp8(0);
        let c = ctx(&[0, 0], &[7, 7, 7, 7]);
        assert!(matches!(a.kl_to(&b, &c), Err(Error::Input(_))));
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut p = mlp8(17);
        p.theta[0] = 0.1 + 0.2; // not exactly representable as a short decimal
        p.save(&path).unwrap();
        let q = PolicyParams::load(&path).unwrap();
        assert_eq!(p, q);
        for (a, b) in p.theta.iter().zip(&q.theta) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn probabilities_normalize(seed in 0u64..200, o0 in 0u16..3, o1 in 0u16..4) {
            let p = if seed % 2 == 0 { mlp8(seed) } else {
                let mut p = tabular8();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                p.theta.iter_mut().for_each(|x| *x = rng.gen_range(-3.0..3.0));
                p
            };
            let c = ctx(&[o0, o1], &[(seed % 8) as u16, 0, 7, 7]);
            let total: f64 = p.log_probs(&c).iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
