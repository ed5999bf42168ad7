//! Hold the gradient estimators against exact enumeration oracles.
//!
//! The policies here are small enough to integrate exactly, so estimator
//! properties that are usually argued about can simply be computed: the
//! leave-one-out estimator is unbiased to machine precision, the
//! full-group estimator shrinks the gradient by exactly (1 - 1/G), and a
//! Monte Carlo mean converges to the enumerated expectation. Run with
//! `cargo run --example verify_estimators`.

use rapid_rl::{
    estimator_expectation, estimator_mc, exact_gradient, ClipConfig, EstimatorSpec, FeatureMap,
    Policy, Prompt, Task, Vocab, DEFAULT_JOINT_CAP,
};

/// One-armed bandit over two tokens: reward 1 for token 0, else 0.
fn bandit() -> Task {
    Task::custom(
        "bandit",
        Vocab::new(2),
        1,
        vec![Prompt { id: 0, class: 0, payload: vec![] }],
        |_, tokens| if tokens == [0] { 1.0 } else { 0.0 },
    )
}

/// Policy putting probability `p` on token 0.
fn policy_with(p: f64) -> Policy {
    let logit = (p / (1.0 - p)).ln();
    Policy::new(FeatureMap::prompt_unigram(1, 2), Vocab::new(2), 1, vec![logit, 0.0])
}

fn main() -> rapid_rl::Result<()> {
    let task = bandit();
    let policy = policy_with(0.6);
    let behavior = policy_with(0.5);

    let truth = exact_gradient(&policy, &task, DEFAULT_JOINT_CAP)?;
    println!("exact gradient:            {:?}", truth.as_slice());

    // Exact expectation of the leave-one-out estimator under the stale
    // behavior policy: identical to the truth, not merely close.
    let loo = EstimatorSpec::loo_unclipped();
    for group_size in [2usize, 3, 4] {
        let e =
            estimator_expectation(&loo, &policy, &behavior, &task, group_size, DEFAULT_JOINT_CAP)?;
        println!(
            "leave-one-out, G={group_size}:       {:?}  (deviation {:.1e})",
            e.as_slice(),
            e.max_abs_diff(&truth)
        );
    }

    // The full-group estimator includes each sample in its own baseline,
    // which scales the on-policy expectation by exactly (1 - 1/G).
    println!();
    let full = EstimatorSpec::full_group(ClipConfig::off());
    for group_size in [2usize, 4] {
        let e =
            estimator_expectation(&full, &policy, &policy, &task, group_size, DEFAULT_JOINT_CAP)?;
        let predicted: Vec<f64> =
            truth.as_slice().iter().map(|g| g * (1.0 - 1.0 / group_size as f64)).collect();
        println!(
            "full-group on-policy, G={group_size}: {:?} vs (1-1/G) * truth {predicted:?}",
            e.as_slice()
        );
    }

    // Monte Carlo agreement: the sampled mean closes in on the oracle.
    println!();
    for groups in [100usize, 10_000] {
        let mc = estimator_mc(&loo, &policy, &behavior, &task, 4, groups, 42)?;
        let mut diff = mc.mean.clone();
        diff.add_scaled(&truth, -1.0);
        println!(
            "{groups:>6} sampled groups: relative L2 error {:.4}, cosine {:.5}",
            diff.norm() / truth.norm(),
            mc.mean.cosine(&truth).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
