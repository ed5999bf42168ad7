//! Advantage and policy-gradient estimators.
//!
//! The estimators consume groups of samples that share a prompt. Rewards
//! are compared within the group (group-relative advantages); when the
//! samples were drawn by an older policy, per-sequence importance weights
//! re-center both the baseline and the gradient on the current policy.
//! Weights can be clipped before use - capping is the stability-minded
//! default, flooring and symmetric band modes exist for comparison.
//!
//! Estimator facts worth keeping straight (all verified against the
//! enumeration oracle in `oracle`):
//! - The leave-one-out variant with clipping off is exactly unbiased.
//! - The full-group variant carries a self-inclusion bias that shrinks
//!   like 1/group_size; on-policy it equals (1 - 1/G) times the true
//!   gradient.
//! - With the behavior policy equal to the current policy, every weight is
//!   exactly 1 and the importance-weighted path reproduces the plain
//!   group-relative path bit for bit.

use crate::error::{Error, Result};
use crate::policy::{Generation, GradientVector, Policy};
use crate::task::Prompt;
use serde::{Deserialize, Serialize};

/// Log-weights beyond this magnitude are refused rather than exponentiated:
/// `exp(50)` is ~5e21, far past anything a sane run produces.
pub const MAX_ABS_LOG_WEIGHT: f64 = 50.0;

/// Default clipping threshold.
pub const DEFAULT_ETA: f64 = 2.0;

/// One scored generation plus the log-probability its sampling policy
/// assigned at draw time (`behavior_logprob`). That recorded value, not a
/// re-score, is the denominator of every importance weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Prompt,
    pub generation: Generation,
    pub reward: f64,
    pub behavior_logprob: f64,
    pub group_id: u64,
}

/// Samples sharing one prompt, compared against each other for advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    samples: Vec<Sample>,
}

impl GroupBatch {
    pub fn new(samples: Vec<Sample>) -> Result<GroupBatch> {
        let first = samples.first().ok_or(Error::EmptyBatch)?;
        let first_id = first.prompt.id;
        for s in &samples[1..] {
            if s.prompt.id != first_id {
                return Err(Error::MixedGroup { first: first_id, other: s.prompt.id });
            }
        }
        Ok(GroupBatch { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn prompt(&self) -> &Prompt {
        &self.samples[0].prompt
    }
}

/// How importance weights are clipped before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// `min(w, eta)`: caps heavy upweighting (the default).
    Cap,
    /// `max(w, eta)`: floors weights at eta, kept for comparison runs.
    Floor,
    /// Clamp into `[1/eta, eta]`.
    Symmetric,
    /// No clipping.
    Off,
}

/// Clipping threshold and mode. One config governs both the leading
/// gradient weight and the baseline weights inside the advantages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eta: f64,
    pub mode: ClipMode,
}

impl ClipConfig {
    pub fn cap(eta: f64) -> ClipConfig {
        ClipConfig { eta, mode: ClipMode::Cap }
    }

    pub fn floor(eta: f64) -> ClipConfig {
        ClipConfig { eta, mode: ClipMode::Floor }
    }

    pub fn symmetric(eta: f64) -> ClipConfig {
        ClipConfig { eta, mode: ClipMode::Symmetric }
    }

    pub fn off() -> ClipConfig {
        ClipConfig { eta: f64::INFINITY, mode: ClipMode::Off }
    }

    /// Threshold sanity: eta must be at least 1 (infinity is fine and
    /// disables capping in practice) whenever a clipping mode is active.
    pub fn validate(&self) -> Result<()> {
        // A NaN eta must fail too, so the comparison rejects rather than accepts.
        if self.mode != ClipMode::Off && (self.eta.is_nan() || self.eta < 1.0) {
            return Err(Error::config(format!(
                "clip eta must be >= 1 when clipping is on, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig::cap(DEFAULT_ETA)
    }
}

/// Applies the configured clipping to one weight. The flag is true iff
/// clipping changed the value.
pub fn clip_weight(w: f64, cfg: &ClipConfig) -> (f64, bool) {
    let clipped = match cfg.mode {
        ClipMode::Cap => w.min(cfg.eta),
        ClipMode::Floor => w.max(cfg.eta),
        ClipMode::Symmetric => w.clamp(1.0 / cfg.eta, cfg.eta),
        ClipMode::Off => w,
    };
    (clipped, clipped != w)
}

/// Per-sequence importance weight of `sample` under `policy`: the current
/// sequence probability over the recorded behavior probability. Log-weights
/// beyond [`MAX_ABS_LOG_WEIGHT`] error out instead of being clamped.
pub fn importance_weight(policy: &Policy, sample: &Sample) -> Result<f64> {
    let log_w = policy.sequence_logprob(&sample.prompt, &sample.generation.tokens)?
        - sample.behavior_logprob;
    if log_w.abs() > MAX_ABS_LOG_WEIGHT {
        return Err(Error::DegenerateWeight { log_weight: log_w, limit: MAX_ABS_LOG_WEIGHT });
    }
    Ok(log_w.exp())
}

/// Reward minus the mean reward of the whole sample list (no grouping).
pub fn single_path_advantages(samples: &[Sample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mean = samples.iter().map(|s| s.reward).sum::<f64>() / samples.len() as f64;
    Ok(samples.iter().map(|s| s.reward - mean).collect())
}

/// Group-relative advantages: reward minus the group's mean reward.
pub fn group_advantages(group: &GroupBatch) -> Vec<f64> {
    let rewards: Vec<f64> = group.samples().iter().map(|s| s.reward).collect();
    weighted_baseline_advantages(&rewards, &vec![1.0; rewards.len()], false)
}

/// Advantages with an importance-weighted baseline. `weights` multiply the
/// rewards inside the baseline only; with `leave_one_out` the sample's own
/// term is dropped from the sum while the divisor stays the group size
/// (that constant divisor is what keeps the leave-one-out gradient
/// estimator exactly unbiased).
pub(crate) fn weighted_baseline_advantages(
    rewards: &[f64],
    weights: &[f64],
    leave_one_out: bool,
) -> Vec<f64> {
    debug_assert_eq!(rewards.len(), weights.len());
    let n = rewards.len() as f64;
    let products: Vec<f64> = rewards.iter().zip(weights).map(|(r, w)| w * r).collect();
    let total: f64 = products.iter().sum();
    rewards
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let baseline = if leave_one_out { (total - products[i]) / n } else { total / n };
            r - baseline
        })
        .collect()
}

/// Group-relative advantages with clipped importance weights on the
/// baseline rewards.
pub fn iw_group_advantages(
    group: &GroupBatch,
    policy: &Policy,
    cfg: &ClipConfig,
    leave_one_out: bool,
) -> Result<Vec<f64>> {
    let weights = clipped_weights(group, policy, cfg)?;
    let rewards: Vec<f64> = group.samples().iter().map(|s| s.reward).collect();
    Ok(weighted_baseline_advantages(&rewards, &weights, leave_one_out))
}

fn raw_weights(group: &GroupBatch, policy: &Policy) -> Result<Vec<f64>> {
    group
        .samples()
        .iter()
        .map(|s| importance_weight(policy, s))
        .collect()
}

fn clipped_weights(group: &GroupBatch, policy: &Policy, cfg: &ClipConfig) -> Result<Vec<f64>> {
    Ok(raw_weights(group, policy)?
        .into_iter()
        .map(|w| clip_weight(w, cfg).0)
        .collect())
}

/// On-policy group-relative policy gradient: the mean over all samples of
/// `advantage * grad log prob`, with plain group-mean baselines.
pub fn grpg_gradient(groups: &[GroupBatch], policy: &Policy) -> Result<GradientVector> {
    if groups.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n: usize = groups.iter().map(GroupBatch::len).sum();
    let mut out = GradientVector::zeros(policy.dimension());
    for group in groups {
        let advantages = group_advantages(group);
        for (s, a) in group.samples().iter().zip(advantages) {
            let scale = a / n as f64;
            policy.add_scaled_grad_sequence_logprob(
                &s.prompt,
                &s.generation.tokens,
                scale,
                &mut out,
            )?;
        }
    }
    Ok(out)
}

/// Importance-weighted group-relative policy gradient for off-policy
/// mini-batches: each sample's term is `weight * advantage * grad log
/// prob`, where the advantage baseline uses clipped weights and the
/// leading weight is clipped under the same config when `clip_leading`
/// is set (the default posture; disable it to use the raw ratio).
pub fn iw_grpg_gradient(
    groups: &[GroupBatch],
    policy: &Policy,
    cfg: &ClipConfig,
    leave_one_out: bool,
    clip_leading: bool,
) -> Result<GradientVector> {
    if groups.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate()?;
    let n: usize = groups.iter().map(GroupBatch::len).sum();
    let mut out = GradientVector::zeros(policy.dimension());
    for group in groups {
        let raw = raw_weights(group, policy)?;
        let clipped: Vec<f64> = raw.iter().map(|&w| clip_weight(w, cfg).0).collect();
        let rewards: Vec<f64> = group.samples().iter().map(|s| s.reward).collect();
        let advantages = weighted_baseline_advantages(&rewards, &clipped, leave_one_out);
        for (i, (s, a)) in group.samples().iter().zip(advantages).enumerate() {
            let lead = if clip_leading { clipped[i] } else { raw[i] };
            let scale = lead * a / n as f64;
            policy.add_scaled_grad_sequence_logprob(
                &s.prompt,
                &s.generation.tokens,
                scale,
                &mut out,
            )?;
        }
    }
    Ok(out)
}

/// Group-relative gradient minus `beta` times the gradient of a
/// per-sequence KL penalty against `reference`, estimated on the batch.
///
/// The penalty estimate for a sample y is `ratio - ln(ratio) - 1` with
/// `ratio = reference(y) / policy(y)`; its exact gradient in the policy
/// weights is `(1 - ratio) * grad log policy(y)`. At `policy == reference`
/// the ratio is 1 and the penalty gradient vanishes identically. With
/// `beta = 0` the result equals [`grpg_gradient`] exactly.
pub fn kl_regularized_gradient(
    groups: &[GroupBatch],
    policy: &Policy,
    reference: &Policy,
    beta: f64,
) -> Result<GradientVector> {
    let mut out = grpg_gradient(groups, policy)?;
    if beta == 0.0 {
        return Ok(out);
    }
    let n: usize = groups.iter().map(GroupBatch::len).sum();
    let mut penalty = GradientVector::zeros(policy.dimension());
    for group in groups {
        for s in group.samples() {
            let cur = policy.sequence_logprob(&s.prompt, &s.generation.tokens)?;
            let reference_lp = reference.sequence_logprob(&s.prompt, &s.generation.tokens)?;
            let ratio = (reference_lp - cur).exp();
            policy.add_scaled_grad_sequence_logprob(
                &s.prompt,
                &s.generation.tokens,
                (1.0 - ratio) / n as f64,
                &mut penalty,
            )?;
        }
    }
    out.add_scaled(&penalty, -beta);
    Ok(out)
}
