//! Estimator verification suite behind the `verify` subcommand.
//!
//! Each check pits a production estimator against an independent ground
//! truth: exact enumeration oracles, finite differences, or an algebraic
//! reduction. Checks never read training artifacts, so the suite can run
//! anywhere. The quick level covers unbiasedness, on-policy reductions,
//! Monte Carlo convergence, and suite sensitivity; the full level adds
//! the bias-direction and clipping-bias monotonicity checks plus a
//! statistical bound on the clipped estimator.

use crate::error::{Error, Result};
use crate::estimator::{grpg_gradient, iw_grpg_gradient, ClipConfig, GroupBatch, Sample};
use crate::oracle::{
    estimator_expectation, estimator_expectation_with, estimator_mc, exact_gradient,
    exact_objective, EstimatorSpec,
};
use crate::policy::{FeatureMap, GradientVector, Policy, Vocab};
use crate::task::{Prompt, Task};
use crate::trainer::{run_onpolicy_grpg, run_rapid, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Enumeration budget for verification instances; generous for every
/// instance the suite builds.
const JOINT_CAP: u64 = 200_000;

/// How thorough a verification pass is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyLevel {
    /// Core correctness: unbiasedness, reductions, convergence. Seconds.
    Quick,
    /// Everything in quick plus bias-direction and clipping checks.
    Full,
}

impl std::str::FromStr for VerifyLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quick" => Ok(VerifyLevel::Quick),
            "full" => Ok(VerifyLevel::Full),
            other => Err(Error::config(format!(
                "unknown verify level '{other}', expected quick or full"
            ))),
        }
    }
}

/// Outcome of one check, serializable so failures can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    /// Worst observed deviation; absent when the check could not run.
    pub deviation: Option<f64>,
    /// Bound the deviation is compared against. Most checks require
    /// deviation <= tolerance; sensitivity checks require the opposite
    /// and say so in `detail`.
    pub tolerance: f64,
    /// Instance parameters and measurements, enough to rebuild the case.
    pub detail: String,
}

/// One `[PASS]`/`[FAIL]` line per check.
pub fn format_line(result: &CheckResult) -> String {
    let status = if result.pass { "[PASS]" } else { "[FAIL]" };
    let deviation = match result.deviation {
        Some(d) => format!("{d:.3e}"),
        None => "n/a".to_string(),
    };
    format!(
        "{status} {} (max deviation {deviation}, tolerance {:.1e})",
        result.name, result.tolerance
    )
}

struct Check {
    name: &'static str,
    run: fn() -> Result<CheckResult>,
}

/// Runs every check at `level`, converting harness errors into failed
/// results so one broken check cannot mask the rest.
pub fn run_checks(level: VerifyLevel) -> Vec<CheckResult> {
    let mut checks: Vec<Check> = vec![
        Check { name: "exact_gradient_matches_finite_difference", run: check_finite_difference },
        Check { name: "loo_expectation_unbiased_bandit_g2", run: check_loo_bandit_g2 },
        Check { name: "loo_expectation_unbiased_bandit_g3", run: check_loo_bandit_g3 },
        Check { name: "loo_expectation_unbiased_two_token", run: check_loo_two_token },
        Check { name: "on_policy_reduction_100_batches", run: check_on_policy_reduction },
        Check { name: "h1_trajectory_equals_on_policy", run: check_h1_trajectory },
        Check { name: "mc_convergence_loo_bandit", run: check_mc_convergence },
        Check { name: "tampered_sign_is_detected", run: check_tampered_sign },
    ];
    if level == VerifyLevel::Full {
        checks.extend([
            Check {
                name: "full_group_expectation_scales_by_group_factor",
                run: check_full_group_scaling,
            },
            Check {
                name: "self_inclusion_bias_shrinks_with_group_size",
                run: check_bias_shrinks,
            },
            Check { name: "cap_bias_monotone_in_eta", run: check_cap_monotonicity },
            Check { name: "clipped_mc_within_three_sigma", run: check_clipped_mc },
        ]);
    }

    checks
        .into_iter()
        .map(|check| match (check.run)() {
            Ok(result) => result,
            Err(err) => CheckResult {
                name: check.name.to_string(),
                pass: false,
                deviation: None,
                tolerance: 0.0,
                detail: format!("check could not run: {err}"),
            },
        })
        .collect()
}

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

/// Bandit policy putting `p_first` mass on token 0.
fn bandit_policy(p_first: f64) -> Policy {
    let logit = (p_first / (1.0 - p_first)).ln();
    Policy::new(FeatureMap::prompt_unigram(1, 2), Vocab::new(2), 1, vec![logit, 0.0])
}

/// Two-step task over three tokens with an end-of-sequence token, paired
/// with a bigram policy, so multi-token credit assignment is exercised.
fn two_token_task() -> Task {
    Task::custom(
        "two_token",
        Vocab::with_eos(3, 2),
        2,
        vec![Prompt { id: 0, class: 0, payload: vec![] }],
        |_, tokens| tokens.iter().filter(|&&t| t == 0).count() as f64 / 2.0,
    )
}

fn two_token_policy(scale: f64) -> Policy {
    let map = FeatureMap::tabular_bigram(1, 3, 2);
    let theta: Vec<f64> =
        (0..map.dimension()).map(|i| scale * ((i % 5) as f64 - 2.0) / 10.0).collect();
    Policy::new(map, Vocab::with_eos(3, 2), 2, theta)
}

fn unbiasedness_deviation(
    policy: &Policy,
    behavior: &Policy,
    task: &Task,
    group_size: usize,
) -> Result<f64> {
    let truth = exact_gradient(policy, task, JOINT_CAP)?;
    let spec = EstimatorSpec::loo_unclipped();
    let expectation = estimator_expectation(&spec, policy, behavior, task, group_size, JOINT_CAP)?;
    Ok(expectation.max_abs_diff(&truth))
}

fn check_finite_difference() -> Result<CheckResult> {
    let task = two_token_task();
    let policy = two_token_policy(1.0);
    let exact = exact_gradient(&policy, &task, JOINT_CAP)?;
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..policy.dimension() {
        let mut up = policy.clone();
        up.theta_mut()[i] += eps;
        let mut down = policy.clone();
        down.theta_mut()[i] -= eps;
        let fd = (exact_objective(&up, &task, JOINT_CAP)?
            - exact_objective(&down, &task, JOINT_CAP)?)
            / (2.0 * eps);
        worst = worst.max((fd - exact.as_slice()[i]).abs());
    }
    let tolerance = 1e-7;
    Ok(CheckResult {
        name: "exact_gradient_matches_finite_difference".to_string(),
        pass: worst <= tolerance,
        deviation: Some(worst),
        tolerance,
        detail: format!(
            "central differences with eps {eps} over {} components on the \
             two-token eos task",
            policy.dimension()
        ),
    })
}

fn loo_bandit_check(name: &str, group_size: usize) -> Result<CheckResult> {
    let task = bandit_task();
    let policy = bandit_policy(0.6);
    let behavior = bandit_policy(0.5);
    let deviation = unbiasedness_deviation(&policy, &behavior, &task, group_size)?;
    let tolerance = 1e-8;
    Ok(CheckResult {
        name: name.to_string(),
        pass: deviation <= tolerance,
        deviation: Some(deviation),
        tolerance,
        detail: format!(
            "bandit, behavior uniform, policy P(first)=0.6, group size {group_size}, \
             leave-one-out unclipped expectation vs exact gradient"
        ),
    })
}

fn check_loo_bandit_g2() -> Result<CheckResult> {
    loo_bandit_check("loo_expectation_unbiased_bandit_g2", 2)
}

fn check_loo_bandit_g3() -> Result<CheckResult> {
    loo_bandit_check("loo_expectation_unbiased_bandit_g3", 3)
}

fn check_loo_two_token() -> Result<CheckResult> {
    let task = two_token_task();
    let policy = two_token_policy(1.0);
    let behavior = two_token_policy(-0.5);
    let deviation = unbiasedness_deviation(&policy, &behavior, &task, 2)?;
    let tolerance = 1e-8;
    Ok(CheckResult {
        name: "loo_expectation_unbiased_two_token".to_string(),
        pass: deviation <= tolerance,
        deviation: Some(deviation),
        tolerance,
        detail: "two-token eos task, off-policy behavior, group size 2, \
                 leave-one-out unclipped expectation vs exact gradient"
            .to_string(),
    })
}

fn check_on_policy_reduction() -> Result<CheckResult> {
    let task = Task::last_token_match(4, 4, 2, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let map = FeatureMap::prompt_unigram(task.num_classes(), 4);
        let theta: Vec<f64> = (0..map.dimension()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let policy = Policy::new(map, task.vocab(), task.max_len(), theta);
        let mut groups = Vec::new();
        for (slot, prompt) in task.prompts().iter().take(3).enumerate() {
            let samples: Vec<Sample> = (0..4)
                .map(|_| {
                    let generation = policy.sample_generation(prompt, &mut rng);
                    let behavior_logprob = generation.logprob();
                    let reward = task.reward_for(prompt, &generation.tokens);
                    Sample {
                        prompt: prompt.clone(),
                        generation,
                        reward,
                        behavior_logprob,
                        group_id: slot as u64,
                    }
                })
                .collect();
            groups.push(GroupBatch::new(samples)?);
        }
        let plain = grpg_gradient(&groups, &policy)?;
        let weighted = iw_grpg_gradient(&groups, &policy, &ClipConfig::off(), false, true)?;
        worst = worst.max(plain.max_abs_diff(&weighted));
    }
    let tolerance = 1e-12;
    Ok(CheckResult {
        name: "on_policy_reduction_100_batches".to_string(),
        pass: worst <= tolerance,
        deviation: Some(worst),
        tolerance,
        detail: "100 random on-policy batches (3 groups of 4, random weights in \
                 [-1,1]); importance-weighted vs plain group-relative gradient"
            .to_string(),
    })
}

fn check_h1_trajectory() -> Result<CheckResult> {
    let task = Task::last_token_match(4, 4, 1, 3)?;
    let config = TrainConfig {
        n_inference: 16,
        n_group: 4,
        n_step: 16,
        outer_steps: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let policy = Policy::zeros(
        FeatureMap::prompt_unigram(task.num_classes(), 4),
        task.vocab(),
        task.max_len(),
    );
    let rapid = run_rapid(&config, &task, &policy)?;
    let grpg = run_onpolicy_grpg(&config, &task, &policy)?;
    let mut worst = GradientVector(rapid.policy.theta().to_vec())
        .max_abs_diff(&GradientVector(grpg.policy.theta().to_vec()));
    for (a, b) in rapid.metrics.iter().zip(grpg.metrics.iter()) {
        worst = worst.max((a.mean_reward - b.mean_reward).abs());
        worst = worst.max(a.staleness.abs());
    }
    let tolerance = 1e-12;
    Ok(CheckResult {
        name: "h1_trajectory_equals_on_policy".to_string(),
        pass: worst <= tolerance && rapid.metrics.len() == grpg.metrics.len(),
        deviation: Some(worst),
        tolerance,
        detail: "batch-size ratio 1 (16/16), 8 outer steps, seed 5: final weights, \
                 per-step rewards, and drift all match the on-policy run"
            .to_string(),
    })
}

fn check_mc_convergence() -> Result<CheckResult> {
    let task = bandit_task();
    let policy = bandit_policy(0.6);
    let behavior = bandit_policy(0.5);
    let truth = exact_gradient(&policy, &task, JOINT_CAP)?;
    let spec = EstimatorSpec::loo_unclipped();
    let estimate = estimator_mc(&spec, &policy, &behavior, &task, 4, 200_000, 23)?;
    let cosine = estimate.mean.cosine(&truth).unwrap_or(-1.0);
    let mut diff = estimate.mean.clone();
    diff.add_scaled(&truth, -1.0);
    let rel_l2 = diff.norm() / truth.norm();
    let tolerance = 0.05;
    Ok(CheckResult {
        name: "mc_convergence_loo_bandit".to_string(),
        pass: cosine >= 0.99 && rel_l2 <= tolerance,
        deviation: Some(rel_l2),
        tolerance,
        detail: format!(
            "bandit, behavior uniform, policy P(first)=0.6, 200000 sampled groups \
             of 4: relative L2 error {rel_l2:.4} (<= 0.05), cosine {cosine:.6} (>= 0.99)"
        ),
    })
}

fn check_tampered_sign() -> Result<CheckResult> {
    let task = bandit_task();
    let policy = bandit_policy(0.6);
    let behavior = bandit_policy(0.5);
    let truth = exact_gradient(&policy, &task, JOINT_CAP)?;
    let spec = EstimatorSpec::loo_unclipped();
    let tampered =
        estimator_expectation_with(&policy, &behavior, &task, 2, JOINT_CAP, |group, policy| {
            let mut grad = iw_grpg_gradient(
                std::slice::from_ref(group),
                policy,
                &spec.clip,
                spec.leave_one_out,
                spec.clip_leading,
            )?;
            grad.scale(-1.0);
            Ok(grad)
        })?;
    let deviation = tampered.max_abs_diff(&truth);
    let tolerance = 0.1;
    Ok(CheckResult {
        name: "tampered_sign_is_detected".to_string(),
        pass: deviation > tolerance,
        deviation: Some(deviation),
        tolerance,
        detail: "sensitivity control: a sign-flipped advantage must deviate from \
                 the oracle by MORE than the tolerance, proving the expectation \
                 harness can fail"
            .to_string(),
    })
}

fn check_full_group_scaling() -> Result<CheckResult> {
    let task = bandit_task();
    let policy = bandit_policy(0.6);
    let truth = exact_gradient(&policy, &task, JOINT_CAP)?;
    let spec = EstimatorSpec::full_group(ClipConfig::off());
    let mut worst = 0.0f64;
    for group_size in [2usize, 4] {
        let expectation =
            estimator_expectation(&spec, &policy, &policy, &task, group_size, JOINT_CAP)?;
        let mut scaled = truth.clone();
        scaled.scale(1.0 - 1.0 / group_size as f64);
        worst = worst.max(expectation.max_abs_diff(&scaled));
    }
    let tolerance = 1e-12;
    Ok(CheckResult {
        name: "full_group_expectation_scales_by_group_factor".to_string(),
        pass: worst <= tolerance,
        deviation: Some(worst),
        tolerance,
        detail: "on-policy full-group expectation equals (1 - 1/G) times the exact \
                 gradient for G in {2, 4}; the self-inclusion shrinkage law"
            .to_string(),
    })
}

fn full_group_bias(policy: &Policy, behavior: &Policy, task: &Task, g: usize) -> Result<f64> {
    let truth = exact_gradient(policy, task, JOINT_CAP)?;
    let spec = EstimatorSpec {
        clip: ClipConfig::off(),
        clip_leading: false,
        ..EstimatorSpec::full_group(ClipConfig::off())
    };
    let mut expectation = estimator_expectation(&spec, policy, behavior, task, g, JOINT_CAP)?;
    expectation.add_scaled(&truth, -1.0);
    Ok(expectation.norm())
}

fn check_bias_shrinks() -> Result<CheckResult> {
    let task = bandit_task();
    let policy = bandit_policy(0.75);
    let behavior = bandit_policy(0.5);
    let bias2 = full_group_bias(&policy, &behavior, &task, 2)?;
    let bias3 = full_group_bias(&policy, &behavior, &task, 3)?;
    Ok(CheckResult {
        name: "self_inclusion_bias_shrinks_with_group_size".to_string(),
        pass: bias3 < bias2 && bias2 > 1e-3,
        deviation: Some(bias3 - bias2),
        tolerance: 0.0,
        detail: format!(
            "reference bandit (policy P(first)=0.75, behavior uniform): full-group \
             bias norm {bias3:.6} at group size 3 must sit strictly below \
             {bias2:.6} at group size 2"
        ),
    })
}

fn check_cap_monotonicity() -> Result<CheckResult> {
    // Leave-one-out baselines are independent of their sample, so clipping
    // them costs nothing in expectation; the clipping shift shows up in the
    // full-group estimator, measured against its own unclipped expectation.
    let task = bandit_task();
    let policy = bandit_policy(0.75);
    let behavior = bandit_policy(0.5);
    let unclipped = estimator_expectation(
        &EstimatorSpec::full_group(ClipConfig::off()),
        &policy,
        &behavior,
        &task,
        2,
        JOINT_CAP,
    )?;
    let gap = |eta: f64| -> Result<f64> {
        let spec = EstimatorSpec::full_group(ClipConfig::cap(eta));
        let mut expectation =
            estimator_expectation(&spec, &policy, &behavior, &task, 2, JOINT_CAP)?;
        expectation.add_scaled(&unclipped, -1.0);
        Ok(expectation.norm())
    };
    // Importance weights here are exactly 1.5 and 0.5, so caps below 1.5
    // bite progressively harder and a cap at 1.5 changes nothing.
    let g11 = gap(1.1)?;
    let g13 = gap(1.3)?;
    let g15 = gap(1.5)?;
    let tolerance = 1e-12;
    Ok(CheckResult {
        name: "cap_bias_monotone_in_eta".to_string(),
        pass: g11 > g13 && g13 > g15 && g15 <= tolerance,
        deviation: Some(g15),
        tolerance,
        detail: format!(
            "full-group cap shift norms vs the unclipped expectation: eta 1.1 -> \
             {g11:.6}, 1.3 -> {g13:.6}, 1.5 -> {g15:.3e}; must decrease and vanish \
             once the cap clears the largest weight"
        ),
    })
}

fn check_clipped_mc() -> Result<CheckResult> {
    let task = bandit_task();
    let policy = bandit_policy(0.75);
    let behavior = bandit_policy(0.5);
    let spec = EstimatorSpec {
        clip: ClipConfig::cap(1.2),
        ..EstimatorSpec::loo_unclipped()
    };
    let exact = estimator_expectation(&spec, &policy, &behavior, &task, 2, JOINT_CAP)?;
    let estimate = estimator_mc(&spec, &policy, &behavior, &task, 2, 20_000, 41)?;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..exact.dim() {
        let gap = (estimate.mean.as_slice()[i] - exact.as_slice()[i]).abs();
        worst = worst.max(gap - 3.0 * estimate.stderr.as_slice()[i]);
    }
    Ok(CheckResult {
        name: "clipped_mc_within_three_sigma".to_string(),
        pass: worst <= 0.0,
        deviation: Some(worst),
        tolerance: 0.0,
        detail: "capped (eta 1.2) leave-one-out estimator: 20000-group Monte Carlo \
                 mean within three standard errors of its exact expectation per \
                 component (deviation is the worst signed margin)"
            .to_string(),
    })
}
