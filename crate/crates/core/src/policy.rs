//! Linear-softmax autoregressive token policy.
//!
//! At every decoding position the policy maps the context `(prompt, prefix)` to
//! a feature vector `phi` through a [`FeatureMap`] and emits
//! `softmax(W^T phi)` over the vocabulary. Because the logits are linear in the
//! weights, every gradient the optimizer needs has a closed form:
//!
//! ```text
//! d log pi(tok | ctx) / dW = phi (x) (onehot(tok) - p)
//! ```
//!
//! Both the trainable actor and the frozen anchor are [`PolicyParams`].

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verifiers::RewardBreakdown;

pub type TokenId = usize;
pub type PromptId = u64;

/// Dense `rows x cols` matrix stored row-major. Rows index features, columns
/// index vocabulary entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `||self - other|| / ||other||`, falling back to the absolute difference
    /// when `other` is zero.
    pub fn relative_error(&self, other: &Matrix) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let denom = other.norm();
        if denom == 0.0 {
            diff
        } else {
            diff / denom
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rank-one accumulation `self[f, v] += coeff * phi[f] * dir[v]`.
    pub fn add_outer(&mut self, phi: &[f64], dir: &[f64], coeff: f64) {
        debug_assert_eq!(phi.len(), self.rows);
        debug_assert_eq!(dir.len(), self.cols);
        for (f, &x) in phi.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let c = coeff * x;
            let row = &mut self.data[f * self.cols..(f + 1) * self.cols];
            for (w, &d) in row.iter_mut().zip(dir) {
                *w += c * d;
            }
        }
    }
}

/// Maps a decoding context to a bounded feature vector.
///
/// Implementations must be deterministic and keep every entry in `[-1, 1]`.
pub trait FeatureMap: Sync {
    fn dim(&self) -> usize;

    fn embed(&self, prompt: PromptId, prefix: &[TokenId], out: &mut [f64]);

    /// Adds context-dependent constants to the logits (for example a
    /// candidate-vocabulary mask). Offsets carry no parameters, so they do not
    /// change the form of any gradient.
    fn logit_offsets(&self, _prompt: PromptId, _prefix: &[TokenId], _out: &mut [f64]) {}

    /// Token that terminates a rollout, if the token space has one.
    fn end_token(&self) -> Option<TokenId> {
        None
    }
}

/// Prefix-independent features: the same vector for every context of a prompt.
/// Used for one-step bandits.
#[derive(Debug, Clone)]
pub struct ConstantFeatures {
    pub phi: Vec<f64>,
    pub end_token: Option<TokenId>,
}

impl FeatureMap for ConstantFeatures {
    fn dim(&self) -> usize {
        self.phi.len()
    }

    fn embed(&self, _prompt: PromptId, _prefix: &[TokenId], out: &mut [f64]) {
        out.copy_from_slice(&self.phi);
    }

    fn end_token(&self) -> Option<TokenId> {
        self.end_token
    }
}

/// Pseudo-random features hashed from `(seed, prompt, prefix)`. Every context
/// gets its own vector in `[-1, 1]^dim`.
#[derive(Debug, Clone)]
pub struct HashedFeatures {
    pub dim: usize,
    pub seed: u64,
    pub end_token: Option<TokenId>,
}

impl FeatureMap for HashedFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: PromptId, prefix: &[TokenId], out: &mut [f64]) {
        let mut h = mix64(self.seed ^ mix64(prompt.wrapping_add(0x5851_f42d_4c95_7f2d)));
        for &t in prefix {
            h = mix64(h ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
        for (i, o) in out.iter_mut().enumerate() {
            let v = mix64(h.wrapping_add(i as u64));
            *o = unit_interval(v) * 2.0 - 1.0;
        }
    }

    fn end_token(&self) -> Option<TokenId> {
        self.end_token
    }
}

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Maps a 64-bit hash to `[0, 1)`.
#[inline]
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Derives an independent stream seed from a path of integers so that random
/// draws do not depend on scheduling order.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Weights of the linear-softmax policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    weights: Matrix,
    max_len: usize,
}

impl PolicyParams {
    pub fn zeros(feature_dim: usize, vocab_size: usize, max_len: usize) -> Result<Self> {
        Self::from_weights(Matrix::zeros(feature_dim, vocab_size), max_len)
    }

    pub fn from_weights(weights: Matrix, max_len: usize) -> Result<Self> {
        if weights.cols() < 2 {
            return Err(Error::input("vocab_size must be at least 2"));
        }
        if weights.rows() < 1 {
            return Err(Error::input("feature_dim must be at least 1"));
        }
        if max_len < 3 {
            return Err(Error::input("max_len must be at least 3"));
        }
        if !weights.is_finite() {
            return Err(Error::input("weights must be finite"));
        }
        Ok(PolicyParams { weights, max_len })
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.cols()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// Direct weight access. Callers are responsible for keeping entries finite.
    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    /// Gradient-ascent update `W += lr * grad`, rejecting non-finite results.
    pub fn apply_update(&mut self, grad: &Matrix, lr: f64) -> Result<()> {
        if grad.rows() != self.feature_dim() || grad.cols() != self.vocab_size() {
            return Err(Error::input("update shape does not match weights"));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("update contains NaN or inf".into()));
        }
        self.weights.add_scaled(grad, lr);
        if !self.weights.is_finite() {
            return Err(Error::NonFinite("weights overflowed after update".into()));
        }
        Ok(())
    }

    fn check_features(&self, fmap: &dyn FeatureMap) -> Result<()> {
        if fmap.dim() != self.feature_dim() {
            return Err(Error::input(format!(
                "feature map dim {} does not match policy feature_dim {}",
                fmap.dim(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    /// Raw logits `W^T phi` written into `out`.
    pub fn logits_into(&self, phi: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (f, &x) in phi.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.weights.row(f)) {
                *o += x * w;
            }
        }
    }

    /// Embeds the context into `phi` and writes the next-token
    /// log-probabilities into `out`.
    pub fn context_log_probs(
        &self,
        fmap: &dyn FeatureMap,
        prompt: PromptId,
        prefix: &[TokenId],
        phi: &mut [f64],
        out: &mut [f64],
    ) {
        fmap.embed(prompt, prefix, phi);
        self.logits_into(phi, out);
        fmap.logit_offsets(prompt, prefix, out);
        log_normalize(out);
    }

    /// Full next-token distribution (as log-probabilities) for a context.
    pub fn next_log_probs(
        &self,
        fmap: &dyn FeatureMap,
        prompt: PromptId,
        prefix: &[TokenId],
    ) -> Vec<f64> {
        let mut phi = vec![0.0; self.feature_dim()];
        let mut out = vec![0.0; self.vocab_size()];
        self.context_log_probs(fmap, prompt, prefix, &mut phi, &mut out);
        out
    }
}

/// In-place log-sum-exp normalization of a logit vector.
pub fn log_normalize(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

/// Deep copy used to freeze the anchor policy.
pub fn snapshot(params: &PolicyParams) -> PolicyParams {
    params.clone()
}

/// One sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt_id: PromptId,
    pub tokens: Vec<TokenId>,
    pub actor_logprobs: Vec<f64>,
    /// `None` until annotated against a frozen anchor.
    pub anchor_logprobs: Option<Vec<f64>>,
    pub text: String,
    pub reward: Option<RewardBreakdown>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The `n` rollouts sampled for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt_id: PromptId,
    pub rollouts: Vec<Rollout>,
}

fn sample_index<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum.
    log_probs
        .iter()
        .enumerate()
        .rev()
        .find(|(_, lp)| lp.is_finite() && **lp > f64::NEG_INFINITY)
        .map(|(i, _)| i)
        .unwrap_or(log_probs.len() - 1)
}

/// Samples one rollout from the unmodified softmax, stopping at the feature
/// map's end token or at `params.max_len()`.
pub fn sample_rollout<R: Rng + ?Sized>(
    params: &PolicyParams,
    fmap: &dyn FeatureMap,
    prompt_id: PromptId,
    rng: &mut R,
) -> Rollout {
    sample_rollout_capped(params, fmap, prompt_id, params.max_len(), rng)
}

/// Like [`sample_rollout`] with an explicit horizon, for short bandit-style
/// problems whose horizon is below the policy's `max_len`.
pub fn sample_rollout_capped<R: Rng + ?Sized>(
    params: &PolicyParams,
    fmap: &dyn FeatureMap,
    prompt_id: PromptId,
    horizon: usize,
    rng: &mut R,
) -> Rollout {
    assert_eq!(fmap.dim(), params.feature_dim(), "feature map dim mismatch");
    let horizon = horizon.max(1);
    let end = fmap.end_token();
    let mut phi = vec![0.0; params.feature_dim()];
    let mut lp = vec![0.0; params.vocab_size()];
    let mut tokens = Vec::with_capacity(horizon);
    let mut logprobs = Vec::with_capacity(horizon);
    while tokens.len() < horizon {
        params.context_log_probs(fmap, prompt_id, &tokens, &mut phi, &mut lp);
        let tok = sample_index(&lp, rng);
        tokens.push(tok);
        logprobs.push(lp[tok]);
        if Some(tok) == end {
            break;
        }
    }
    Rollout {
        prompt_id,
        tokens,
        actor_logprobs: logprobs,
        anchor_logprobs: None,
        text: String::new(),
        reward: None,
    }
}

/// Greedy (argmax) decoding; ties go to the lowest token id.
pub fn greedy_decode(
    params: &PolicyParams,
    fmap: &dyn FeatureMap,
    prompt_id: PromptId,
) -> Vec<TokenId> {
    let end = fmap.end_token();
    let mut phi = vec![0.0; params.feature_dim()];
    let mut lp = vec![0.0; params.vocab_size()];
    let mut tokens = Vec::with_capacity(params.max_len());
    while tokens.len() < params.max_len() {
        params.context_log_probs(fmap, prompt_id, &tokens, &mut phi, &mut lp);
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        tokens.push(best);
        if Some(best) == end {
            break;
        }
    }
    tokens
}

fn check_tokens(params: &PolicyParams, tokens: &[TokenId]) -> Result<()> {
    if let Some(bad) = tokens.iter().find(|&&t| t >= params.vocab_size()) {
        return Err(Error::input(format!(
            "token id {bad} out of range for vocab_size {}",
            params.vocab_size()
        )));
    }
    Ok(())
}

/// `log pi(tokens[s] | prompt, tokens[..s])` for every position `s`.
pub fn log_prob_tokens(
    params: &PolicyParams,
    fmap: &dyn FeatureMap,
    prompt_id: PromptId,
    tokens: &[TokenId],
) -> Result<Vec<f64>> {
    params.check_features(fmap)?;
    check_tokens(params, tokens)?;
    let mut phi = vec![0.0; params.feature_dim()];
    let mut lp = vec![0.0; params.vocab_size()];
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(s, &tok)| {
            params.context_log_probs(fmap, prompt_id, &tokens[..s], &mut phi, &mut lp);
            lp[tok]
        })
        .collect())
}

/// Accumulates `coeff * grad_W log pi(token | phi)` into `grad`, given the
/// log-probabilities at that position.
pub(crate) fn accumulate_token_score(
    grad: &mut Matrix,
    phi: &[f64],
    log_probs: &[f64],
    token: TokenId,
    coeff: f64,
) {
    let mut dir: Vec<f64> = log_probs.iter().map(|lp| -lp.exp()).collect();
    dir[token] += 1.0;
    grad.add_outer(phi, &dir, coeff);
}

/// Analytic `grad_W sum_s log pi(tokens[s] | prefix)`.
pub fn score_gradient(
    params: &PolicyParams,
    fmap: &dyn FeatureMap,
    rollout: &Rollout,
) -> Result<Matrix> {
    let mut grad = Matrix::zeros(params.feature_dim(), params.vocab_size());
    accumulate_score_gradient(params, fmap, rollout.prompt_id, &rollout.tokens, 1.0, &mut grad)?;
    Ok(grad)
}

/// `grad += coeff * grad_W log pi(tokens)`.
pub fn accumulate_score_gradient(
    params: &PolicyParams,
    fmap: &dyn FeatureMap,
    prompt_id: PromptId,
    tokens: &[TokenId],
    coeff: f64,
    grad: &mut Matrix,
) -> Result<()> {
    params.check_features(fmap)?;
    check_tokens(params, tokens)?;
    if grad.rows() != params.feature_dim() || grad.cols() != params.vocab_size() {
        return Err(Error::input("gradient buffer shape mismatch"));
    }
    let mut phi = vec![0.0; params.feature_dim()];
    let mut lp = vec![0.0; params.vocab_size()];
    for (s, &tok) in tokens.iter().enumerate() {
        params.context_log_probs(fmap, prompt_id, &tokens[..s], &mut phi, &mut lp);
        accumulate_token_score(grad, &phi, &lp, tok, coeff);
    }
    Ok(())
}

/// Writes the checkpoint body for a policy: `(feature_dim, vocab_size,
/// max_len)` as little-endian u64, then the weights as little-endian f64.
pub fn write_params<W: Write>(params: &PolicyParams, w: &mut W) -> Result<()> {
    for v in [params.feature_dim(), params.vocab_size(), params.max_len()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for x in params.weights.as_slice() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<PolicyParams> {
    let mut buf = [0u8; 8];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut buf)?;
        *d = usize::try_from(u64::from_le_bytes(buf))
            .map_err(|_| Error::input("checkpoint dimension overflows usize"))?;
    }
    let [feature_dim, vocab_size, max_len] = dims;
    let n = feature_dim
        .checked_mul(vocab_size)
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| Error::input("checkpoint dimensions are implausibly large"))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    PolicyParams::from_weights(Matrix::from_vec(feature_dim, vocab_size, data)?, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hashed(dim: usize) -> HashedFeatures {
        HashedFeatures {
            dim,
            seed: 11,
            end_token: None,
        }
    }

    #[test]
    fn forced_end_token_gives_single_token_rollout() {
        // vocab {a, eos}; weight on eos huge.
        let mut p = PolicyParams::zeros(1, 2, 5).unwrap();
        p.weights_mut().set(0, 1, 1000.0);
        let fmap = ConstantFeatures {
            phi: vec![1.0],
            end_token: Some(1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sample_rollout(&p, &fmap, 0, &mut rng);
        assert_eq!(r.tokens, vec![1]);
        assert!(r.actor_logprobs[0].abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_uniform_log_probs() {
        let p = PolicyParams::zeros(3, 4, 5).unwrap();
        let lp = log_prob_tokens(&p, &hashed(3), 7, &[0, 3, 2]).unwrap();
        for v in lp {
            assert!((v - (0.25f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logit_gives_zero_log_prob() {
        let mut p = PolicyParams::zeros(1, 3, 5).unwrap();
        p.weights_mut().set(0, 2, 1000.0);
        let fmap = ConstantFeatures {
            phi: vec![1.0],
            end_token: None,
        };
        let lp = log_prob_tokens(&p, &fmap, 0, &[2]).unwrap();
        assert!(lp[0].abs() < 1e-12);
        let other = log_prob_tokens(&p, &fmap, 0, &[0]).unwrap();
        assert!(other[0] < -900.0 && other[0].is_finite());
    }

    #[test]
    fn out_of_range_token_rejected() {
        let p = PolicyParams::zeros(3, 4, 5).unwrap();
        assert!(matches!(
            log_prob_tokens(&p, &hashed(3), 0, &[4]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn rejects_invalid_shapes() {
        assert!(PolicyParams::zeros(0, 4, 5).is_err());
        assert!(PolicyParams::zeros(2, 1, 5).is_err());
        assert!(PolicyParams::zeros(2, 4, 2).is_err());
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 0, f64::NAN);
        assert!(PolicyParams::from_weights(m, 3).is_err());
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let vocab = 5;
        let p = PolicyParams::zeros(4, vocab, 3).unwrap();
        let fmap = hashed(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut counts = vec![0usize; vocab];
        for _ in 0..n {
            let r = sample_rollout_capped(&p, &fmap, 0, 1, &mut rng);
            counts[r.tokens[0]] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.2).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let mut p = PolicyParams::zeros(4, 6, 8).unwrap();
        for (i, w) in p.weights_mut().as_mut_slice().iter_mut().enumerate() {
            *w = ((i * 7) % 5) as f64 * 0.3 - 0.6;
        }
        let fmap = HashedFeatures {
            dim: 4,
            seed: 2,
            end_token: Some(5),
        };
        let a = sample_rollout(&p, &fmap, 9, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_rollout(&p, &fmap, 9, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
        assert!(a.len() <= 8);
        // rollout stops at the first end token
        if let Some(pos) = a.tokens.iter().position(|&t| t == 5) {
            assert_eq!(pos, a.len() - 1);
        }
        let lp = log_prob_tokens(&p, &fmap, 9, &a.tokens).unwrap();
        assert_eq!(lp, a.actor_logprobs);
    }

    #[test]
    fn uniform_single_step_score_gradient() {
        let p = PolicyParams::zeros(2, 2, 3).unwrap();
        let phi = vec![0.5, -1.0];
        let fmap = ConstantFeatures {
            phi: phi.clone(),
            end_token: None,
        };
        let r = Rollout {
            prompt_id: 0,
            tokens: vec![0],
            actor_logprobs: vec![0.5f64.ln()],
            anchor_logprobs: None,
            text: String::new(),
            reward: None,
        };
        let g = score_gradient(&p, &fmap, &r).unwrap();
        for f in 0..2 {
            assert!((g.get(f, 0) - 0.5 * phi[f]).abs() < 1e-15);
            assert!((g.get(f, 1) + 0.5 * phi[f]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_features_give_zero_gradient() {
        let mut p = PolicyParams::zeros(3, 4, 5).unwrap();
        p.weights_mut().set(1, 2, 3.0);
        let fmap = ConstantFeatures {
            phi: vec![0.0; 3],
            end_token: None,
        };
        let r = sample_rollout(&p, &fmap, 0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(score_gradient(&p, &fmap, &r).unwrap().norm(), 0.0);
    }

    #[test]
    fn snapshot_is_independent() {
        let mut actor = PolicyParams::zeros(3, 4, 5).unwrap();
        actor.weights_mut().set(0, 0, 0.25);
        let snap = snapshot(&actor);
        assert_eq!(snap, actor);
        let fmap = hashed(3);
        let before = log_prob_tokens(&actor, &fmap, 1, &[1, 2]).unwrap();
        assert_eq!(log_prob_tokens(&snap, &fmap, 1, &[1, 2]).unwrap(), before);
        let w = actor.weights().get(0, 0);
        actor.weights_mut().set(0, 0, w + 1.0);
        assert_eq!(snap.weights().get(0, 0), 0.25);
    }

    #[test]
    fn checkpoint_layout_is_exact() {
        let mut p = PolicyParams::zeros(2, 3, 4).unwrap();
        p.weights_mut().set(1, 2, -0.1);
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 6 * 8);
        assert_eq!(&buf[0..8], &2u64.to_le_bytes());
        assert_eq!(&buf[8..16], &3u64.to_le_bytes());
        assert_eq!(&buf[16..24], &4u64.to_le_bytes());
        assert_eq!(&buf[64..72], &(-0.1f64).to_le_bytes());
        let back = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(back, p);
    }
}
