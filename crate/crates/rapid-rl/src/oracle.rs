//! Exact reference quantities for enumerable instances.
//!
//! Everything here is computed by brute-force enumeration from policy
//! primitives (scoring and closed-form gradients), never through the
//! estimator code paths it is used to check. The one deliberate exception
//! is [`estimator_expectation`], whose *integrand* is the production
//! estimator itself: it enumerates every joint group outcome under the
//! behavior policy and weights the estimator's output by the outcome's
//! exact probability, which turns "is this estimator unbiased?" into an
//! equality check instead of a statistical argument.

use crate::error::{Error, Result};
use crate::estimator::{
    grpg_gradient, iw_grpg_gradient, ClipConfig, GroupBatch, Sample,
};
use crate::policy::{Generation, GradientVector, Policy};
use crate::task::{Prompt, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Default cap on joint group outcomes (`outputs^group_size`) per prompt.
pub const DEFAULT_JOINT_CAP: u64 = 100_000;

/// Exact objective, gradient, and per-prompt values in one bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Expected reward averaged uniformly over prompts.
    pub exact_j: f64,
    /// Exact gradient of the objective.
    pub exact_gradient: GradientVector,
    /// Expected reward per prompt id.
    pub per_prompt: BTreeMap<u32, f64>,
    /// Total enumerated outputs across all prompts.
    pub outcome_count: usize,
}

/// Exact expected reward of `policy` on a single prompt.
pub fn exact_value(policy: &Policy, task: &Task, prompt: &Prompt, cap: u64) -> Result<f64> {
    let mut value = 0.0;
    for (tokens, prob) in policy.enumerate_outputs(prompt, cap)? {
        value += prob * task.reward_for(prompt, &tokens);
    }
    Ok(value)
}

/// Exact objective: expected reward averaged uniformly over task prompts.
pub fn exact_objective(policy: &Policy, task: &Task, cap: u64) -> Result<f64> {
    let mut total = 0.0;
    for prompt in task.prompts() {
        total += exact_value(policy, task, prompt, cap)?;
    }
    Ok(total / task.prompts().len() as f64)
}

/// Exact gradient of the objective: the probability-weighted sum of
/// `reward * grad log prob` over every output of every prompt. No baseline
/// appears; adding any per-prompt constant to the rewards cannot change
/// the result because expected score-function gradients are zero.
pub fn exact_gradient(policy: &Policy, task: &Task, cap: u64) -> Result<GradientVector> {
    let mut out = GradientVector::zeros(policy.dimension());
    let scale = 1.0 / task.prompts().len() as f64;
    for prompt in task.prompts() {
        for (tokens, prob) in policy.enumerate_outputs(prompt, cap)? {
            let reward = task.reward_for(prompt, &tokens);
            if reward != 0.0 {
                policy.add_scaled_grad_sequence_logprob(
                    prompt,
                    &tokens,
                    scale * prob * reward,
                    &mut out,
                )?;
            }
        }
    }
    Ok(out)
}

/// Exact objective, gradient, and per-prompt values in one pass.
pub fn oracle_report(policy: &Policy, task: &Task, cap: u64) -> Result<OracleReport> {
    let mut per_prompt = BTreeMap::new();
    let mut outcome_count = 0usize;
    let mut total = 0.0;
    let mut grad = GradientVector::zeros(policy.dimension());
    let prompt_scale = 1.0 / task.prompts().len() as f64;
    for prompt in task.prompts() {
        let outs = policy.enumerate_outputs(prompt, cap)?;
        let mut value = 0.0;
        for (tokens, prob) in &outs {
            let reward = task.reward_for(prompt, tokens);
            value += prob * reward;
            if reward != 0.0 {
                policy.add_scaled_grad_sequence_logprob(
                    prompt,
                    tokens,
                    prompt_scale * prob * reward,
                    &mut grad,
                )?;
            }
        }
        per_prompt.insert(prompt.id, value);
        outcome_count += outs.len();
        total += value;
    }
    Ok(OracleReport {
        exact_j: total * prompt_scale,
        exact_gradient: grad,
        per_prompt,
        outcome_count,
    })
}

/// Which gradient estimator an expectation or Monte Carlo run evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Plain group-relative gradient (no importance machinery).
    OnPolicyGroup,
    /// Importance-weighted group-relative gradient.
    ImportanceWeighted,
}

/// Full description of an estimator variant under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub leave_one_out: bool,
    pub clip: ClipConfig,
    pub clip_leading: bool,
}

impl EstimatorSpec {
    /// The exactly-unbiased variant: leave-one-out, no clipping.
    pub fn loo_unclipped() -> EstimatorSpec {
        EstimatorSpec {
            kind: EstimatorKind::ImportanceWeighted,
            leave_one_out: true,
            clip: ClipConfig::off(),
            clip_leading: false,
        }
    }

    /// Full-group importance-weighted variant under `clip`.
    pub fn full_group(clip: ClipConfig) -> EstimatorSpec {
        EstimatorSpec {
            kind: EstimatorKind::ImportanceWeighted,
            leave_one_out: false,
            clip,
            clip_leading: true,
        }
    }

    /// Plain on-policy group-relative estimator.
    pub fn on_policy() -> EstimatorSpec {
        EstimatorSpec {
            kind: EstimatorKind::OnPolicyGroup,
            leave_one_out: false,
            clip: ClipConfig::off(),
            clip_leading: false,
        }
    }

    fn evaluate(&self, group: &GroupBatch, policy: &Policy) -> Result<GradientVector> {
        match self.kind {
            EstimatorKind::OnPolicyGroup => grpg_gradient(std::slice::from_ref(group), policy),
            EstimatorKind::ImportanceWeighted => iw_grpg_gradient(
                std::slice::from_ref(group),
                policy,
                &self.clip,
                self.leave_one_out,
                self.clip_leading,
            ),
        }
    }
}

/// Exact expectation of a single-group estimator under `behavior`:
/// enumerates every joint assignment of `group_size` outputs per prompt,
/// evaluates the production estimator on that group, and accumulates the
/// results weighted by exact joint probabilities; prompt contributions are
/// averaged uniformly. Errors when `outputs^group_size` exceeds
/// `joint_cap` for any prompt (fall back to [`estimator_mc`]).
pub fn estimator_expectation(
    spec: &EstimatorSpec,
    policy: &Policy,
    behavior: &Policy,
    task: &Task,
    group_size: usize,
    joint_cap: u64,
) -> Result<GradientVector> {
    estimator_expectation_with(policy, behavior, task, group_size, joint_cap, |group, policy| {
        spec.evaluate(group, policy)
    })
}

/// Joint-enumeration engine behind [`estimator_expectation`], generic over
/// the integrand so the verification suite can prove it would catch a
/// broken estimator.
pub(crate) fn estimator_expectation_with(
    policy: &Policy,
    behavior: &Policy,
    task: &Task,
    group_size: usize,
    joint_cap: u64,
    integrand: impl Fn(&GroupBatch, &Policy) -> Result<GradientVector>,
) -> Result<GradientVector> {
    assert!(group_size >= 1);
    let mut total = GradientVector::zeros(policy.dimension());
    let prompt_scale = 1.0 / task.prompts().len() as f64;
    for prompt in task.prompts() {
        let outs = behavior.enumerate_outputs(prompt, joint_cap)?;
        let joint = (outs.len() as u128)
            .checked_pow(group_size as u32)
            .unwrap_or(u128::MAX);
        if joint > joint_cap as u128 {
            return Err(Error::EnumerationCap { needed: joint, cap: joint_cap });
        }
        // Per-output pieces reused across joint assignments.
        let pieces: Vec<(Vec<u32>, Vec<f64>, f64, f64)> = outs
            .into_iter()
            .map(|(tokens, prob)| {
                let logprobs = behavior.token_logprobs(prompt, &tokens)?;
                let reward = task.reward_for(prompt, &tokens);
                Ok((tokens, logprobs, prob, reward))
            })
            .collect::<Result<_>>()?;

        let mut idx = vec![0usize; group_size];
        loop {
            let mut joint_prob = 1.0;
            let samples: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    let (tokens, logprobs, prob, reward) = &pieces[i];
                    joint_prob *= prob;
                    Sample {
                        prompt: prompt.clone(),
                        generation: Generation {
                            tokens: tokens.clone(),
                            logprobs: logprobs.clone(),
                        },
                        reward: *reward,
                        behavior_logprob: logprobs.iter().sum(),
                        group_id: 0,
                    }
                })
                .collect();
            let group = GroupBatch::new(samples)?;
            let grad = integrand(&group, policy)?;
            total.add_scaled(&grad, prompt_scale * joint_prob);

            // Odometer over joint assignments.
            let mut pos = group_size;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < pieces.len() {
                    break;
                }
                idx[pos] = 0;
            }
            if pos == 0 && idx[0] == 0 {
                break;
            }
        }
    }
    Ok(total)
}

/// Monte Carlo counterpart of [`estimator_expectation`] for instances too
/// large to enumerate jointly: samples `groups_per_prompt` groups per
/// prompt under `behavior` and returns the component-wise mean and its
/// standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: GradientVector,
    pub stderr: GradientVector,
    pub groups: usize,
}

pub fn estimator_mc(
    spec: &EstimatorSpec,
    policy: &Policy,
    behavior: &Policy,
    task: &Task,
    group_size: usize,
    groups_per_prompt: usize,
    seed: u64,
) -> Result<McEstimate> {
    assert!(group_size >= 1 && groups_per_prompt >= 2);
    let dim = policy.dimension();
    let num_prompts = task.prompts().len() as f64;
    let mut mean = GradientVector::zeros(dim);
    let mut variance = GradientVector::zeros(dim);
    for (pi, prompt) in task.prompts().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((pi as u64) << 32));
        let mut sum = vec![0.0f64; dim];
        let mut sumsq = vec![0.0f64; dim];
        for gi in 0..groups_per_prompt {
            let samples: Vec<Sample> = (0..group_size)
                .map(|_| {
                    let gen = behavior.sample_generation(prompt, &mut rng);
                    let behavior_logprob = gen.logprob();
                    let reward = task.reward_for(prompt, &gen.tokens);
                    Sample {
                        prompt: prompt.clone(),
                        generation: gen,
                        reward,
                        behavior_logprob,
                        group_id: gi as u64,
                    }
                })
                .collect();
            let grad = spec.evaluate(&GroupBatch::new(samples)?, policy)?;
            for (i, &g) in grad.0.iter().enumerate() {
                sum[i] += g;
                sumsq[i] += g * g;
            }
        }
        let k = groups_per_prompt as f64;
        for i in 0..dim {
            mean.0[i] += sum[i] / k / num_prompts;
            let var = ((sumsq[i] - sum[i] * sum[i] / k) / (k - 1.0)).max(0.0);
            // Var of the overall mean: sum over prompts of var/k, over P^2.
            variance.0[i] += var / k / (num_prompts * num_prompts);
        }
    }
    let stderr = GradientVector(variance.0.iter().map(|v| v.sqrt()).collect());
    Ok(McEstimate { mean, stderr, groups: groups_per_prompt * task.prompts().len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{FeatureMap, Vocab, DEFAULT_ENUMERATION_CAP};
    use crate::task::Task;

    /// Single-prompt bandit: two tokens, one step, reward 1 iff token 0.
    fn bandit_task() -> Task {
        Task::custom(
            "bandit",
            Vocab::new(2),
            1,
            vec![Prompt { id: 0, class: 0, payload: vec![] }],
            |_, tokens| if tokens == [0] { 1.0 } else { 0.0 },
        )
    }

    fn bandit_policy(p_first: f64) -> Policy {
        let map = FeatureMap::prompt_unigram(1, 2);
        let theta = vec![(p_first / (1.0 - p_first)).ln(), 0.0];
        Policy::new(map, Vocab::new(2), 1, theta)
    }

    const CAP: u64 = DEFAULT_ENUMERATION_CAP;

    #[test]
    fn uniform_bandit_value_and_gradient() {
        let task = bandit_task();
        let policy = Policy::zeros(FeatureMap::prompt_unigram(1, 2), Vocab::new(2), 1);
        let j = exact_objective(&policy, &task, CAP).unwrap();
        assert!((j - 0.5).abs() < 1e-12);
        // dJ/dtheta_0 = p(0)(1 - p(0)) = 0.25 at the uniform point.
        let g = exact_gradient(&policy, &task, CAP).unwrap();
        assert!((g.0[0] - 0.25).abs() < 1e-12);
        assert!((g.0[1] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn shifted_bandit_gradient() {
        let task = bandit_task();
        let policy = bandit_policy(0.6);
        let j = exact_objective(&policy, &task, CAP).unwrap();
        assert!((j - 0.6).abs() < 1e-12);
        let g = exact_gradient(&policy, &task, CAP).unwrap();
        assert!((g.0[0] - 0.24).abs() < 1e-12);
        assert!((g.0[1] + 0.24).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_baseline_invariant() {
        // Adding a constant to every reward of a prompt cannot move the
        // exact gradient: expected score functions vanish.
        let prompts = vec![Prompt { id: 0, class: 0, payload: vec![] }];
        let plain = Task::custom("plain", Vocab::new(3), 2, prompts.clone(), |_, t| {
            if t[1] == 2 { 1.0 } else { 0.0 }
        });
        let shifted = Task::custom("shifted", Vocab::new(3), 2, prompts, |_, t| {
            if t[1] == 2 { 6.0 } else { 5.0 }
        });
        let map = FeatureMap::tabular_bigram(1, 3, 2);
        let dim = map.dimension();
        let theta: Vec<f64> = (0..dim).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.2).collect();
        let policy = Policy::new(map, Vocab::new(3), 2, theta);
        let g1 = exact_gradient(&policy, &plain, CAP).unwrap();
        let g2 = exact_gradient(&policy, &shifted, CAP).unwrap();
        assert!(g1.max_abs_diff(&g2) < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_difference_of_objective() {
        let task = Task::last_token_match(3, 4, 2, 1).unwrap();
        let map = FeatureMap::prompt_unigram(task.num_classes(), 3);
        let dim = map.dimension();
        let theta: Vec<f64> = (0..dim).map(|i| ((i * 11 % 7) as f64 - 3.0) * 0.15).collect();
        let policy = Policy::new(map, Vocab::new(3), 2, theta.clone());
        let grad = exact_gradient(&policy, &task, CAP).unwrap();
        let h = 1e-5;
        for i in 0..dim {
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let jp = exact_objective(&Policy::new(map, Vocab::new(3), 2, plus), &task, CAP)
                .unwrap();
            let jm = exact_objective(&Policy::new(map, Vocab::new(3), 2, minus), &task, CAP)
                .unwrap();
            let fd = (jp - jm) / (2.0 * h);
            assert!(
                (grad.0[i] - fd).abs() / grad.0[i].abs().max(1.0) < 1e-7,
                "component {i}: {} vs {}",
                grad.0[i],
                fd
            );
        }
    }

    #[test]
    fn oracle_report_aggregates_per_prompt_values() {
        let task = Task::last_token_match(3, 4, 1, 2).unwrap();
        let policy = Policy::zeros(
            FeatureMap::prompt_unigram(task.num_classes(), 3),
            Vocab::new(3),
            1,
        );
        let report = oracle_report(&policy, &task, CAP).unwrap();
        assert_eq!(report.per_prompt.len(), 4);
        for v in report.per_prompt.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((report.exact_j - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.outcome_count, 4 * 3);
        let mean: f64 = report.per_prompt.values().sum::<f64>() / 4.0;
        assert!((report.exact_j - mean).abs() < 1e-15);
        let grad = exact_gradient(&policy, &task, CAP).unwrap();
        assert_eq!(report.exact_gradient, grad);
    }

    #[test]
    fn loo_unclipped_expectation_is_exactly_unbiased() {
        let task = bandit_task();
        let policy = bandit_policy(0.6);
        let behavior = bandit_policy(0.5);
        let truth = exact_gradient(&policy, &task, CAP).unwrap();
        for group_size in [2usize, 3, 4] {
            let e = estimator_expectation(
                &EstimatorSpec::loo_unclipped(),
                &policy,
                &behavior,
                &task,
                group_size,
                DEFAULT_JOINT_CAP,
            )
            .unwrap();
            assert!(
                e.max_abs_diff(&truth) < 1e-12,
                "group size {group_size}: {:?} vs {:?}",
                e.0,
                truth.0
            );
        }
    }

    #[test]
    fn loo_unbiasedness_holds_on_multi_token_instance_with_eos() {
        // Mixed-length outputs via eos exercise termination handling in the
        // joint enumeration.
        let vocab = Vocab::with_eos(3, 2);
        let prompts = vec![
            Prompt { id: 0, class: 0, payload: vec![] },
            Prompt { id: 1, class: 1, payload: vec![] },
        ];
        let task = Task::custom("first_zero", vocab, 2, prompts, |_, tokens| {
            if tokens[0] == 0 { 1.0 } else { 0.0 }
        });
        let map = FeatureMap::tabular_bigram(2, 3, 2);
        let dim = map.dimension();
        let theta: Vec<f64> = (0..dim).map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.1).collect();
        let policy = Policy::new(map, vocab, 2, theta);
        let behavior_theta: Vec<f64> =
            (0..dim).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.1).collect();
        let behavior = Policy::new(map, vocab, 2, behavior_theta);
        let truth = exact_gradient(&policy, &task, CAP).unwrap();
        let e = estimator_expectation(
            &EstimatorSpec::loo_unclipped(),
            &policy,
            &behavior,
            &task,
            3,
            DEFAULT_JOINT_CAP,
        )
        .unwrap();
        assert!(e.max_abs_diff(&truth) < 1e-10, "{:?} vs {:?}", e.0, truth.0);
    }

    #[test]
    fn on_policy_full_group_expectation_carries_self_inclusion_factor() {
        // The plain group estimator's exact on-policy expectation is
        // (1 - 1/G) times the true gradient; the group-mean baseline is
        // not independent of the sample it centers.
        let task = bandit_task();
        let policy = bandit_policy(0.6);
        let truth = exact_gradient(&policy, &task, CAP).unwrap();
        for group_size in [2usize, 4] {
            let e = estimator_expectation(
                &EstimatorSpec::on_policy(),
                &policy,
                &policy,
                &task,
                group_size,
                DEFAULT_JOINT_CAP,
            )
            .unwrap();
            let factor = 1.0 - 1.0 / group_size as f64;
            let mut scaled = GradientVector::zeros(truth.dim());
            scaled.add_scaled(&truth, factor);
            assert!(
                e.max_abs_diff(&scaled) < 1e-12,
                "group size {group_size}: {:?} vs {:?}",
                e.0,
                scaled.0
            );
        }
    }

    #[test]
    fn full_group_bias_shrinks_with_group_size() {
        // Reference off-policy instance: behavior uniform, policy at 0.75.
        let task = bandit_task();
        let policy = bandit_policy(0.75);
        let behavior = bandit_policy(0.5);
        let truth = exact_gradient(&policy, &task, CAP).unwrap();
        let spec = EstimatorSpec::full_group(ClipConfig::off());
        let bias = |g: usize| {
            let e = estimator_expectation(&spec, &policy, &behavior, &task, g, DEFAULT_JOINT_CAP)
                .unwrap();
            let mut d = e.clone();
            d.add_scaled(&truth, -1.0);
            d.norm()
        };
        let b2 = bias(2);
        let b3 = bias(3);
        assert!(b3 < b2, "bias at G=3 ({b3}) not below G=2 ({b2})");
        assert!(b2 > 1e-3, "reference instance should have visible bias");
    }

    #[test]
    fn capping_moves_the_expectation_monotonically() {
        // Heavier capping (smaller eta) pulls the expectation further from
        // the unclipped one; once eta covers the largest weight the
        // expectation matches the unclipped estimator exactly.
        let task = bandit_task();
        let policy = bandit_policy(0.75); // weights are 1.5 and 0.5
        let behavior = bandit_policy(0.5);
        let unclipped = estimator_expectation(
            &EstimatorSpec::full_group(ClipConfig::off()),
            &policy,
            &behavior,
            &task,
            2,
            DEFAULT_JOINT_CAP,
        )
        .unwrap();
        let gap = |eta: f64| {
            let e = estimator_expectation(
                &EstimatorSpec::full_group(ClipConfig::cap(eta)),
                &policy,
                &behavior,
                &task,
                2,
                DEFAULT_JOINT_CAP,
            )
            .unwrap();
            let mut d = e;
            d.add_scaled(&unclipped, -1.0);
            d.norm()
        };
        let g11 = gap(1.1);
        let g13 = gap(1.3);
        let g15 = gap(1.5);
        assert!(g11 > g13 && g13 > g15, "gaps {g11} {g13} {g15}");
        assert!(g15 < 1e-15, "eta at the max weight must not clip");
    }

    #[test]
    fn mc_mean_agrees_with_exact_expectation_within_three_sigma() {
        let task = bandit_task();
        let policy = bandit_policy(0.7);
        let behavior = bandit_policy(0.5);
        let spec = EstimatorSpec::full_group(ClipConfig::cap(2.0));
        let exact =
            estimator_expectation(&spec, &policy, &behavior, &task, 4, DEFAULT_JOINT_CAP).unwrap();
        let mc = estimator_mc(&spec, &policy, &behavior, &task, 4, 20_000, 13).unwrap();
        for i in 0..exact.dim() {
            let dev = (mc.mean.0[i] - exact.0[i]).abs();
            let band = 3.0 * mc.stderr.0[i];
            assert!(dev <= band, "component {i}: dev {dev} > 3 sigma {band}");
        }
    }

    #[test]
    fn joint_cap_is_enforced() {
        let task = bandit_task();
        let policy = bandit_policy(0.5);
        let err = estimator_expectation(
            &EstimatorSpec::on_policy(),
            &policy,
            &policy,
            &task,
            40,
            DEFAULT_JOINT_CAP,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EnumerationCap { .. }));
    }

    #[test]
    fn tampered_estimator_is_caught_by_the_expectation_check() {
        // Flipping the advantage sign must produce a visible gap against
        // the exact gradient; this is the sensitivity guarantee behind the
        // verification suite.
        let task = bandit_task();
        let policy = bandit_policy(0.6);
        let behavior = bandit_policy(0.5);
        let truth = exact_gradient(&policy, &task, CAP).unwrap();
        let flipped = estimator_expectation_with(
            &policy,
            &behavior,
            &task,
            2,
            DEFAULT_JOINT_CAP,
            |group, policy| {
                let mut g = iw_grpg_gradient(
                    std::slice::from_ref(group),
                    policy,
                    &ClipConfig::off(),
                    true,
                    false,
                )?;
                g.scale(-1.0);
                Ok(g)
            },
        )
        .unwrap();
        assert!(flipped.max_abs_diff(&truth) > 0.1);
    }
}
