//! Policy-gradient updates for the linear-softmax policy.
//!
//! All updates are plain gradient ascent with a constant learning rate.
//! Advantages and rewards are detached scalars; the only differentiated
//! quantities are the policy's own log-probabilities (and, optionally, an exact
//! per-token KL to the anchor).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    accumulate_score_gradient, accumulate_token_score, sample_rollout_capped, FeatureMap, Matrix,
    PolicyParams, PromptId, Rollout, TokenId,
};
use crate::retention::categorical_kl;

/// Training algorithm of one experiment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sft,
    Grpo,
    Rapo,
    GrpoV1,
    GrpoV2,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Sft,
        Algorithm::Grpo,
        Algorithm::Rapo,
        Algorithm::GrpoV1,
        Algorithm::GrpoV2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sft => "sft",
            Algorithm::Grpo => "grpo",
            Algorithm::Rapo => "rapo",
            Algorithm::GrpoV1 => "grpo_v1",
            Algorithm::GrpoV2 => "grpo_v2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown algorithm `{s}`")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub clip_range: f64,
    pub kl_coeff: f64,
    pub group_size: usize,
    pub epochs_per_task: usize,
    /// Gradient steps taken on each rollout batch. With one step the
    /// importance ratio is exactly 1 and clipping never activates.
    pub inner_epochs: usize,
    /// Prompts per optimization step.
    pub prompts_per_step: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 50.0,
            clip_range: 0.2,
            kl_coeff: 0.0,
            group_size: 4,
            epochs_per_task: 12,
            inner_epochs: 1,
            prompts_per_step: 5,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group_size must be at least 2"));
        }
        if !(self.clip_range > 0.0) {
            return Err(Error::config("clip_range must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if !(self.kl_coeff >= 0.0) {
            return Err(Error::config("kl_coeff must be non-negative"));
        }
        if self.epochs_per_task == 0 || self.inner_epochs == 0 || self.prompts_per_step == 0 {
            return Err(Error::config(
                "epochs_per_task, inner_epochs and prompts_per_step must be positive",
            ));
        }
        Ok(())
    }
}

/// Per-step diagnostics, one CSV row each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub reward_mean: f64,
    pub sigma_batch: f64,
    pub sigma_hat: f64,
    /// Sum of `|A_i|` over the step's rollouts.
    pub adv_magnitude: f64,
    pub ret_reward_mean: f64,
    pub kl_anchor: f64,
}

pub const STEP_LOG_HEADER: &str =
    "step,reward_mean,sigma_batch,sigma_hat,adv_magnitude,ret_reward_mean,kl_anchor";

/// Side information from one surrogate step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateStats {
    pub objective: f64,
    pub n_tokens: usize,
    pub clipped_tokens: usize,
    pub update_norm: f64,
}

/// Clipped surrogate (minus the optional KL penalty) averaged over all
/// tokens of the batch, together with its gradient.
///
/// `rollouts[i].actor_logprobs` must hold the log-probabilities under the
/// policy that sampled the batch; the ratio compares `actor` against them.
pub fn surrogate_gradient(
    actor: &PolicyParams,
    anchor: Option<&PolicyParams>,
    fmap: &dyn FeatureMap,
    rollouts: &[&Rollout],
    advantages: &[f64],
    clip_range: f64,
    kl_coeff: f64,
) -> Result<(Matrix, SurrogateStats)> {
    if rollouts.len() != advantages.len() {
        return Err(Error::input("one advantage per rollout is required"));
    }
    if let Some(a) = advantages.iter().find(|a| !a.is_finite()) {
        return Err(Error::input(format!("non-finite advantage {a}")));
    }
    if kl_coeff > 0.0 && anchor.is_none() {
        return Err(Error::state("kl_coeff > 0 requires an anchor policy"));
    }
    let n_tokens: usize = rollouts.iter().map(|r| r.tokens.len()).sum();
    let mut grad = Matrix::zeros(actor.feature_dim(), actor.vocab_size());
    if n_tokens == 0 {
        let stats = SurrogateStats {
            objective: 0.0,
            n_tokens,
            clipped_tokens: 0,
            update_norm: 0.0,
        };
        return Ok((grad, stats));
    }
    let norm = 1.0 / n_tokens as f64;
    let mut phi = vec![0.0; actor.feature_dim()];
    let mut lp = vec![0.0; actor.vocab_size()];
    let mut lq = vec![0.0; actor.vocab_size()];
    let mut dir = vec![0.0; actor.vocab_size()];
    let mut objective = 0.0;
    let mut clipped = 0;
    for (r, &adv) in rollouts.iter().zip(advantages) {
        if r.actor_logprobs.len() != r.tokens.len() {
            return Err(Error::input("rollout log-prob length mismatch"));
        }
        if let Some(bad) = r.tokens.iter().find(|&&t| t >= actor.vocab_size()) {
            return Err(Error::input(format!("token {bad} out of range")));
        }
        for (s, &tok) in r.tokens.iter().enumerate() {
            let prefix = &r.tokens[..s];
            actor.context_log_probs(fmap, r.prompt_id, prefix, &mut phi, &mut lp);
            let ratio = (lp[tok] - r.actor_logprobs[s]).exp();
            let lo = 1.0 - clip_range;
            let hi = 1.0 + clip_range;
            let unclipped = ratio * adv;
            let clipped_term = ratio.clamp(lo, hi) * adv;
            objective += norm * unclipped.min(clipped_term);
            let is_clipped = (adv > 0.0 && ratio > hi) || (adv < 0.0 && ratio < lo);
            if is_clipped {
                clipped += 1;
            } else if adv != 0.0 {
                accumulate_token_score(&mut grad, &phi, &lp, tok, norm * adv * ratio);
            }
            if kl_coeff > 0.0 {
                let anchor = anchor.expect("checked above");
                anchor.context_log_probs(fmap, r.prompt_id, prefix, &mut phi, &mut lq);
                // phi is context-only, so the anchor call leaves it unchanged.
                let kl = categorical_kl(&lp, &lq);
                objective -= norm * kl_coeff * kl;
                for v in 0..dir.len() {
                    let p = lp[v].exp();
                    dir[v] = if p == 0.0 { 0.0 } else { p * (lp[v] - lq[v] - kl) };
                }
                grad.add_outer(&phi, &dir, -norm * kl_coeff);
            }
        }
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("surrogate gradient contains NaN or inf".into()));
    }
    let stats = SurrogateStats {
        objective,
        n_tokens,
        clipped_tokens: clipped,
        update_norm: 0.0,
    };
    Ok((grad, stats))
}

/// One gradient-ascent step on the clipped surrogate.
pub fn policy_gradient_step(
    actor: &PolicyParams,
    anchor: Option<&PolicyParams>,
    fmap: &dyn FeatureMap,
    rollouts: &[&Rollout],
    advantages: &[f64],
    cfg: &OptimConfig,
) -> Result<(PolicyParams, SurrogateStats)> {
    let (grad, mut stats) = surrogate_gradient(
        actor,
        anchor,
        fmap,
        rollouts,
        advantages,
        cfg.clip_range,
        cfg.kl_coeff,
    )?;
    let mut next = actor.clone();
    next.apply_update(&grad, cfg.learning_rate)?;
    stats.update_norm = cfg.learning_rate * grad.norm();
    Ok((next, stats))
}

/// A supervised target: prompt and the full gold token sequence.
pub type SftExample = (PromptId, Vec<TokenId>);

/// Mean token log-likelihood of the gold sequences.
pub fn sft_objective(actor: &PolicyParams, fmap: &dyn FeatureMap, examples: &[SftExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (prompt, toks) in examples {
        let lp = crate::policy::log_prob_tokens(actor, fmap, *prompt, toks)?;
        total += lp.iter().sum::<f64>();
        n += lp.len();
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Gradient of [`sft_objective`].
pub fn sft_gradient(actor: &PolicyParams, fmap: &dyn FeatureMap, examples: &[SftExample]) -> Result<Matrix> {
    let n: usize = examples.iter().map(|(_, t)| t.len()).sum();
    let mut grad = Matrix::zeros(actor.feature_dim(), actor.vocab_size());
    if n == 0 {
        return Ok(grad);
    }
    for (prompt, toks) in examples {
        accumulate_score_gradient(actor, fmap, *prompt, toks, 1.0 / n as f64, &mut grad)?;
    }
    Ok(grad)
}

/// One step of cross-entropy descent (log-likelihood ascent) on gold sequences.
pub fn sft_step(
    actor: &PolicyParams,
    fmap: &dyn FeatureMap,
    examples: &[SftExample],
    learning_rate: f64,
) -> Result<PolicyParams> {
    let grad = sft_gradient(actor, fmap, examples)?;
    let mut next = actor.clone();
    next.apply_update(&grad, learning_rate)?;
    Ok(next)
}

/// Monte Carlo score-function estimate
/// `(1/M) sum_j (R(y_j) - b) grad log pi(y_j)` over `samples` fresh rollouts
/// of at most `horizon` tokens. Rewards are evaluated on the sampled tokens
/// and treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn estimate_local_gradient<R: Rng + ?Sized>(
    actor: &PolicyParams,
    fmap: &dyn FeatureMap,
    prompt: PromptId,
    reward: &dyn Fn(&[TokenId]) -> f64,
    baseline: f64,
    samples: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Matrix> {
    if samples == 0 {
        return Err(Error::input("at least one sample is required"));
    }
    let mut grad = Matrix::zeros(actor.feature_dim(), actor.vocab_size());
    let w = 1.0 / samples as f64;
    for _ in 0..samples {
        let y = sample_rollout_capped(actor, fmap, prompt, horizon, rng);
        let coeff = (reward(&y.tokens) - baseline) * w;
        if coeff != 0.0 {
            accumulate_score_gradient(actor, fmap, prompt, &y.tokens, coeff, &mut grad)?;
        }
    }
    Ok(grad)
}

/// Largest number of sequences [`enumerate_objective_gradient`] will visit.
pub const MAX_ENUMERATION: usize = 100_000;

fn enumeration_bound(vocab: usize, horizon: usize) -> Option<usize> {
    let mut total = 1usize;
    for _ in 0..horizon {
        total = total.checked_mul(vocab)?;
    }
    Some(total)
}

/// Visits every complete sequence of at most `horizon` tokens with its
/// probability and log-probability trail.
fn enumerate<F>(actor: &PolicyParams, fmap: &dyn FeatureMap, prompt: PromptId, horizon: usize, mut visit: F) -> Result<()>
where
    F: FnMut(&[TokenId], f64),
{
    if horizon == 0 {
        return Err(Error::config("horizon must be positive"));
    }
    match enumeration_bound(actor.vocab_size(), horizon) {
        Some(n) if n <= MAX_ENUMERATION => {}
        _ => {
            return Err(Error::config(format!(
                "enumerating vocab {}^{horizon} sequences exceeds {MAX_ENUMERATION}",
                actor.vocab_size()
            )))
        }
    }
    let end = fmap.end_token();
    let mut phi = vec![0.0; actor.feature_dim()];
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, logp)) = stack.pop() {
        let mut lp = vec![0.0; actor.vocab_size()];
        actor.context_log_probs(fmap, prompt, &prefix, &mut phi, &mut lp);
        for tok in (0..actor.vocab_size()).rev() {
            let mut seq = prefix.clone();
            seq.push(tok);
            let l = logp + lp[tok];
            if seq.len() == horizon || Some(tok) == end {
                visit(&seq, l);
            } else {
                stack.push((seq, l));
            }
        }
    }
    Ok(())
}

/// Exact expected reward `sum_y pi(y) R(y)` by enumeration.
pub fn enumerate_objective(
    actor: &PolicyParams,
    fmap: &dyn FeatureMap,
    prompt: PromptId,
    reward: &dyn Fn(&[TokenId]) -> f64,
    horizon: usize,
) -> Result<f64> {
    let mut total = 0.0;
    enumerate(actor, fmap, prompt, horizon, |seq, logp| {
        total += logp.exp() * reward(seq);
    })?;
    Ok(total)
}

/// Exact gradient of [`enumerate_objective`] with the reward held fixed:
/// `sum_y pi(y) R(y) grad log pi(y)`.
pub fn enumerate_objective_gradient(
    actor: &PolicyParams,
    fmap: &dyn FeatureMap,
    prompt: PromptId,
    reward: &dyn Fn(&[TokenId]) -> f64,
    horizon: usize,
) -> Result<Matrix> {
    let mut grad = Matrix::zeros(actor.feature_dim(), actor.vocab_size());
    let mut seqs = Vec::new();
    enumerate(actor, fmap, prompt, horizon, |seq, logp| {
        let w = logp.exp() * reward(seq);
        if w != 0.0 {
            seqs.push((seq.to_vec(), w));
        }
    })?;
    for (seq, w) in seqs {
        accumulate_score_gradient(actor, fmap, prompt, &seq, w, &mut grad)?;
    }
    Ok(grad)
}
