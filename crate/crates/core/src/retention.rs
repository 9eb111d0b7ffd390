//! Trajectory-drift retention reward and cross-task advantage normalization.
//!
//! For a rollout `y` of length `m` the drift against the frozen anchor is
//!
//! ```text
//! D(y) = max( (1/m) * sum_s [log pi_actor(y_s | y_<s) - log pi_anchor(y_s | y_<s)], 0 )
//! ```
//!
//! and the retention reward is `exp(-alpha * D(y))`, added to the task reward
//! with weight `lambda` before group-relative advantages are formed. Rewards
//! are detached scalars: nothing here participates in differentiation.
//!
//! CTAN replaces the per-group standard deviation in the advantage
//! denominator with an exponential moving average of batch reward standard
//! deviations that persists across optimization steps and task boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{log_prob_tokens, FeatureMap, PolicyParams, Rollout, RolloutGroup};

/// Default advantage-denominator stabilizer.
pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetentionConfig {
    pub alpha: f64,
    pub lambda: f64,
    /// First (1-based) task on which the retention reward is active.
    pub active_from_task: usize,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        RetentionConfig {
            alpha: 20.0,
            lambda: 0.5,
            active_from_task: 2,
        }
    }
}

impl RetentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("retention alpha must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("retention lambda must be non-negative"));
        }
        Ok(())
    }

    pub fn is_active(&self, task: usize) -> bool {
        task >= self.active_from_task
    }
}

/// Persistent EMA of batch reward standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtanState {
    pub sigma_hat: f64,
    pub beta: f64,
    pub initialized: bool,
}

/// Serialized size of [`CtanState`]: two f64 and one flag byte.
pub const CTAN_STATE_BYTES: usize = 17;

impl CtanState {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::config(format!("ctan beta {beta} must lie in (0, 1)")));
        }
        Ok(CtanState {
            sigma_hat: 0.0,
            beta,
            initialized: false,
        })
    }

    pub fn to_bytes(&self) -> [u8; CTAN_STATE_BYTES] {
        let mut out = [0u8; CTAN_STATE_BYTES];
        out[..8].copy_from_slice(&self.sigma_hat.to_le_bytes());
        out[8..16].copy_from_slice(&self.beta.to_le_bytes());
        out[16] = self.initialized as u8;
        out
    }

    pub fn from_bytes(bytes: &[u8; CTAN_STATE_BYTES]) -> Result<Self> {
        let sigma_hat = f64::from_le_bytes(bytes[..8].try_into().unwrap());
        let beta = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let initialized = match bytes[16] {
            0 => false,
            1 => true,
            b => return Err(Error::input(format!("bad ctan flag byte {b}"))),
        };
        if !(sigma_hat >= 0.0) || !(beta > 0.0 && beta < 1.0) {
            return Err(Error::input("corrupt ctan state"));
        }
        Ok(CtanState {
            sigma_hat,
            beta,
            initialized,
        })
    }
}

/// EMA step. The first observation seeds the average directly.
pub fn ctan_update(state: CtanState, sigma_batch: f64) -> CtanState {
    debug_assert!(sigma_batch >= 0.0, "negative batch std {sigma_batch}");
    let sigma_batch = sigma_batch.max(0.0);
    if !state.initialized {
        return CtanState {
            sigma_hat: sigma_batch,
            initialized: true,
            ..state
        };
    }
    CtanState {
        sigma_hat: state.beta * state.sigma_hat + (1.0 - state.beta) * sigma_batch,
        ..state
    }
}

/// How the group-relative advantage denominator is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Population standard deviation of the group's rewards.
    BatchSigma,
    /// Persistent EMA from [`CtanState`].
    Ctan,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// `A_i = (r_i - mean) / (denominator + eps)`.
pub fn group_advantages(
    rewards: &[f64],
    mode: AdvantageMode,
    state: &CtanState,
    eps: f64,
) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::input("a rollout group needs at least two rewards"));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let mu = mean(rewards);
    let denom = match mode {
        AdvantageMode::BatchSigma => population_std(rewards),
        AdvantageMode::Ctan => state.sigma_hat,
    } + eps;
    Ok(rewards.iter().map(|r| (r - mu) / denom).collect())
}

/// Fills `anchor_logprobs` by scoring the rollout's tokens under the frozen
/// anchor. Actor fields are left untouched.
pub fn annotate_anchor(
    rollout: &Rollout,
    anchor: &PolicyParams,
    fmap: &dyn FeatureMap,
) -> Result<Rollout> {
    let lp = log_prob_tokens(anchor, fmap, rollout.prompt_id, &rollout.tokens)?;
    Ok(Rollout {
        anchor_logprobs: Some(lp),
        ..rollout.clone()
    })
}

/// Length-normalized, one-sided truncated log-ratio drift.
pub fn drift(rollout: &Rollout) -> Result<f64> {
    Ok(signed_drift(rollout)?.max(0.0))
}

/// Drift before the `max(., 0)` truncation.
pub fn signed_drift(rollout: &Rollout) -> Result<f64> {
    let anchor = rollout
        .anchor_logprobs
        .as_ref()
        .ok_or_else(|| Error::state("rollout has not been annotated with anchor log-probs"))?;
    if rollout.actor_logprobs.is_empty() {
        return Err(Error::input("zero-length rollout"));
    }
    if anchor.len() != rollout.actor_logprobs.len() {
        return Err(Error::state("anchor and actor log-prob lengths differ"));
    }
    let sum: f64 = rollout
        .actor_logprobs
        .iter()
        .zip(anchor)
        .map(|(a, b)| a - b)
        .sum();
    Ok(sum / rollout.actor_logprobs.len() as f64)
}

/// `exp(-alpha * d)`, in `(0, 1]` for `d >= 0`.
pub fn retention_reward(d: f64, cfg: &RetentionConfig) -> f64 {
    debug_assert!(d >= 0.0);
    (-cfg.alpha * d.max(0.0)).exp()
}

/// `r_task + lambda * r_ret` once retention is active, else `r_task`.
pub fn total_reward(r_task: f64, r_ret: f64, cfg: &RetentionConfig, current_task: usize) -> f64 {
    if cfg.is_active(current_task) {
        r_task + cfg.lambda * r_ret
    } else {
        r_task
    }
}

/// `KL(p || q)` for two categorical distributions given as log-probabilities.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Exact per-token `KL(actor || anchor)` along one rollout, averaged over
/// positions.
pub fn rollout_kl(
    rollout: &Rollout,
    actor: &PolicyParams,
    anchor: &PolicyParams,
    fmap: &dyn FeatureMap,
) -> f64 {
    let mut phi = vec![0.0; actor.feature_dim()];
    let mut lp = vec![0.0; actor.vocab_size()];
    let mut lq = vec![0.0; anchor.vocab_size()];
    let total: f64 = (0..rollout.tokens.len())
        .map(|s| {
            let prefix = &rollout.tokens[..s];
            actor.context_log_probs(fmap, rollout.prompt_id, prefix, &mut phi, &mut lp);
            anchor.context_log_probs(fmap, rollout.prompt_id, prefix, &mut phi, &mut lq);
            categorical_kl(&lp, &lq)
        })
        .sum();
    total / rollout.tokens.len().max(1) as f64
}

/// Mean over the group's rollouts of the position-averaged exact KL to the
/// anchor.
pub fn kl_to_anchor(
    group: &RolloutGroup,
    actor: &PolicyParams,
    anchor: &PolicyParams,
    fmap: &dyn FeatureMap,
) -> Result<f64> {
    if group.rollouts.is_empty() {
        return Err(Error::input("empty rollout group"));
    }
    if group.rollouts.iter().any(|r| r.anchor_logprobs.is_none()) {
        return Err(Error::state("group contains rollouts without anchor annotation"));
    }
    if actor.vocab_size() != anchor.vocab_size() || actor.feature_dim() != anchor.feature_dim() {
        return Err(Error::input("actor and anchor shapes differ"));
    }
    let sum: f64 = group
        .rollouts
        .iter()
        .map(|r| rollout_kl(r, actor, anchor, fmap))
        .sum();
    Ok(sum / group.rollouts.len() as f64)
}

/// Hard drift gating used to probe whether drift matters for forgetting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingVariant {
    /// Zero the reward of rollouts drifting strictly more than the group mean.
    LowDriftOnly,
    /// Zero the reward of rollouts drifting no more than the group mean.
    HighDriftOnly,
}

/// Applies a gating variant to an all-correct group; other groups are
/// returned unchanged. A group is all-correct when every reward is at least
/// `r_max`.
pub fn apply_gating_variant(
    rewards: &[f64],
    drifts: &[f64],
    r_max: f64,
    variant: GatingVariant,
) -> Vec<f64> {
    assert_eq!(rewards.len(), drifts.len());
    if rewards.is_empty() || rewards.iter().any(|&r| r < r_max) {
        return rewards.to_vec();
    }
    let threshold = mean(drifts);
    rewards
        .iter()
        .zip(drifts)
        .map(|(&r, &d)| {
            let keep = match variant {
                GatingVariant::LowDriftOnly => d <= threshold,
                GatingVariant::HighDriftOnly => d > threshold,
            };
            if keep {
                r
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{sample_rollout, snapshot, ConstantFeatures, HashedFeatures};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rollout_with(actor: Vec<f64>, anchor: Vec<f64>) -> Rollout {
        Rollout {
            prompt_id: 0,
            tokens: vec![0; actor.len()],
            actor_logprobs: actor,
            anchor_logprobs: Some(anchor),
            text: String::new(),
            reward: None,
        }
    }

    fn ctan(sigma: f64) -> CtanState {
        CtanState {
            sigma_hat: sigma,
            beta: 0.99,
            initialized: true,
        }
    }

    #[test]
    fn drift_examples() {
        let same = rollout_with(vec![-0.5, -1.0], vec![-0.5, -1.0]);
        assert_eq!(drift(&same).unwrap(), 0.0);

        let less_confident = rollout_with(vec![-2.0, -3.0], vec![-1.0, -1.0]);
        assert!(signed_drift(&less_confident).unwrap() < 0.0);
        assert_eq!(drift(&less_confident).unwrap(), 0.0);

        let three = rollout_with(vec![-0.1, -0.3, -0.5], vec![-0.3, -0.5, -0.7]);
        let one = rollout_with(vec![-0.1], vec![-0.3]);
        assert!((drift(&three).unwrap() - 0.2).abs() < 1e-12);
        assert!((drift(&one).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn drift_requires_annotation() {
        let mut r = rollout_with(vec![-0.1], vec![-0.1]);
        r.anchor_logprobs = None;
        assert!(matches!(drift(&r), Err(Error::State(_))));
    }

    #[test]
    fn drift_is_invariant_to_mean_preserving_extension() {
        let mut r = rollout_with(vec![-0.1, -0.9], vec![-0.5, -0.7]);
        let d = drift(&r).unwrap();
        // appended tokens whose log-ratio equals the current mean
        for _ in 0..3 {
            r.actor_logprobs.push(-1.0 + d);
            r.anchor_logprobs.as_mut().unwrap().push(-1.0);
            r.tokens.push(0);
        }
        assert!((drift(&r).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn retention_reward_examples() {
        let cfg = RetentionConfig::default();
        assert_eq!(retention_reward(0.0, &cfg), 1.0);
        assert!((retention_reward(0.05, &cfg) - (-1.0f64).exp()).abs() < 1e-12);
        let far = retention_reward(30.0, &cfg);
        assert!(far > 0.0 && far < 1e-200);
        assert!(retention_reward(0.1, &cfg) < retention_reward(0.09, &cfg));
    }

    #[test]
    fn total_reward_examples() {
        let cfg = RetentionConfig::default();
        assert_eq!(total_reward(2.0, 1.0, &cfg, 2), 2.5);
        assert_eq!(total_reward(2.0, 1.0, &cfg, 1), 2.0);
        let off = RetentionConfig {
            lambda: 0.0,
            ..cfg
        };
        for r in [0.0, 0.5, 2.0] {
            assert_eq!(total_reward(r, 0.3, &off, 5), r);
        }
    }

    #[test]
    fn ctan_update_examples() {
        let s = ctan_update(ctan(1.0), 0.5);
        assert!((s.sigma_hat - 0.995).abs() < 1e-12);
        let s = ctan_update(ctan(0.7), 0.7);
        assert_eq!(s.sigma_hat, 0.7);

        let fresh = CtanState::new(0.999).unwrap();
        let s = ctan_update(fresh, 0.42);
        assert!(s.initialized);
        assert_eq!(s.sigma_hat, 0.42);

        let mut s = ctan(0.0);
        let mut prev = 0.0;
        for _ in 0..2000 {
            s = ctan_update(s, 1.5);
            assert!(s.sigma_hat >= prev && s.sigma_hat <= 1.5);
            prev = s.sigma_hat;
        }
        assert!((s.sigma_hat - 1.5).abs() < 1e-6);
    }

    #[test]
    fn ctan_state_bytes_round_trip() {
        let s = CtanState {
            sigma_hat: 0.123456789,
            beta: 0.999,
            initialized: true,
        };
        assert_eq!(CtanState::from_bytes(&s.to_bytes()).unwrap(), s);
        let mut bad = s.to_bytes();
        bad[16] = 7;
        assert!(CtanState::from_bytes(&bad).is_err());
        assert!(CtanState::new(1.0).is_err());
    }

    #[test]
    fn advantage_examples() {
        let st = ctan(1.0);
        let a = group_advantages(&[1.0, 1.0, 1.0], AdvantageMode::BatchSigma, &st, 1e-4).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));

        let a = group_advantages(&[1.0, 1.0, 0.0, 0.0], AdvantageMode::BatchSigma, &st, 0.0).unwrap();
        assert_eq!(a, vec![1.0, 1.0, -1.0, -1.0]);

        let a = group_advantages(&[1.0, 0.0], AdvantageMode::Ctan, &ctan(2.0), 0.0).unwrap();
        assert_eq!(a, vec![0.25, -0.25]);

        assert!(group_advantages(&[1.0], AdvantageMode::Ctan, &st, 1e-4).is_err());
    }

    #[test]
    fn ctan_denominator_ignores_current_rewards() {
        let st = ctan(0.8);
        let a = group_advantages(&[2.0, 0.0], AdvantageMode::Ctan, &st, 1e-4).unwrap();
        let b = group_advantages(&[20.0, 0.0], AdvantageMode::Ctan, &st, 1e-4).unwrap();
        assert!((b[0] / a[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn annotate_with_snapshot_matches_actor() {
        let mut actor = PolicyParams::zeros(4, 5, 6).unwrap();
        for (i, w) in actor.weights_mut().as_mut_slice().iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin();
        }
        let fmap = HashedFeatures {
            dim: 4,
            seed: 1,
            end_token: Some(4),
        };
        let anchor = snapshot(&actor);
        let r = sample_rollout(&actor, &fmap, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let a = annotate_anchor(&r, &anchor, &fmap).unwrap();
        assert_eq!(a.anchor_logprobs.as_ref().unwrap(), &a.actor_logprobs);
        assert_eq!(a.tokens, r.tokens);
        let again = annotate_anchor(&a, &anchor, &fmap).unwrap();
        assert_eq!(again, a);
        assert_eq!(drift(&a).unwrap(), 0.0);
    }

    #[test]
    fn annotate_against_saturated_wrong_anchor() {
        let fmap = ConstantFeatures {
            phi: vec![1.0],
            end_token: None,
        };
        let actor = PolicyParams::zeros(1, 3, 4).unwrap();
        let mut anchor = PolicyParams::zeros(1, 3, 4).unwrap();
        anchor.weights_mut().set(0, 2, 50.0);
        let r = Rollout {
            prompt_id: 0,
            tokens: vec![0, 1],
            actor_logprobs: log_prob_tokens(&actor, &fmap, 0, &[0, 1]).unwrap(),
            anchor_logprobs: None,
            text: String::new(),
            reward: None,
        };
        let a = annotate_anchor(&r, &anchor, &fmap).unwrap();
        assert!(a.anchor_logprobs.unwrap().iter().all(|&v| v < -49.0));
    }

    #[test]
    fn annotate_rejects_vocab_mismatch() {
        let fmap = ConstantFeatures {
            phi: vec![1.0],
            end_token: None,
        };
        let small = PolicyParams::zeros(1, 2, 4).unwrap();
        let r = Rollout {
            prompt_id: 0,
            tokens: vec![3],
            actor_logprobs: vec![-1.0],
            anchor_logprobs: None,
            text: String::new(),
            reward: None,
        };
        assert!(annotate_anchor(&r, &small, &fmap).is_err());
    }

    #[test]
    fn kl_two_atom_closed_form() {
        let fmap = ConstantFeatures {
            phi: vec![1.0],
            end_token: None,
        };
        // actor p = sigmoid(1) on token 1, anchor q = sigmoid(-0.5)
        let mut actor = PolicyParams::zeros(1, 2, 3).unwrap();
        actor.weights_mut().set(0, 1, 1.0);
        let mut anchor = PolicyParams::zeros(1, 2, 3).unwrap();
        anchor.weights_mut().set(0, 1, -0.5);
        let p1 = 1.0 / (1.0 + (-1.0f64).exp());
        let q1 = 1.0 / (1.0 + 0.5f64.exp());
        let expect = p1 * (p1 / q1).ln() + (1.0 - p1) * ((1.0 - p1) / (1.0 - q1)).ln();
        let r = Rollout {
            prompt_id: 0,
            tokens: vec![0, 1, 1],
            actor_logprobs: vec![0.0; 3],
            anchor_logprobs: Some(vec![0.0; 3]),
            text: String::new(),
            reward: None,
        };
        let group = RolloutGroup {
            prompt_id: 0,
            rollouts: vec![r],
        };
        let kl = kl_to_anchor(&group, &actor, &anchor, &fmap).unwrap();
        assert!((kl - expect).abs() < 1e-12);
        assert_eq!(kl_to_anchor(&group, &actor, &actor, &fmap).unwrap(), 0.0);
    }

    #[test]
    fn kl_requires_annotation() {
        let fmap = ConstantFeatures {
            phi: vec![1.0],
            end_token: None,
        };
        let p = PolicyParams::zeros(1, 2, 3).unwrap();
        let mut r = rollout_with(vec![-0.7], vec![-0.7]);
        r.anchor_logprobs = None;
        let group = RolloutGroup {
            prompt_id: 0,
            rollouts: vec![r],
        };
        assert!(matches!(kl_to_anchor(&group, &p, &p, &fmap), Err(Error::State(_))));
    }

    #[test]
    fn gating_examples() {
        let v1 = apply_gating_variant(&[2.0, 2.0], &[0.1, 0.3], 2.0, GatingVariant::LowDriftOnly);
        assert_eq!(v1, vec![2.0, 0.0]);
        let v2 = apply_gating_variant(&[2.0, 2.0], &[0.1, 0.3], 2.0, GatingVariant::HighDriftOnly);
        assert_eq!(v2, vec![0.0, 2.0]);
        let tie = apply_gating_variant(&[2.0; 3], &[0.2; 3], 2.0, GatingVariant::LowDriftOnly);
        assert_eq!(tie, vec![2.0; 3]);
        let mixed = apply_gating_variant(&[2.0, 1.0], &[0.1, 0.3], 2.0, GatingVariant::LowDriftOnly);
        assert_eq!(mixed, vec![2.0, 1.0]);
    }
}
