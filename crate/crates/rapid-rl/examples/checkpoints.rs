//! Save a training run's weights and pick the run back up later.
//!
//! Checkpoints are flat little-endian files (magic, dimensions, step,
//! weights) with a human-readable sidecar next to them. Loading restores
//! the exact weights, so a resumed run continues from the same policy it
//! left off with. Run with `cargo run --example checkpoints`.

use rapid_rl::{
    exact_objective, load_checkpoint, run_rapid, save_checkpoint, Checkpoint, FeatureMap, Policy,
    Task, TrainConfig, DEFAULT_ENUMERATION_CAP,
};

fn main() -> rapid_rl::Result<()> {
    let task = Task::last_token_match(8, 16, 2, 0)?;
    let config = TrainConfig {
        n_inference: 64,
        n_group: 4,
        n_step: 16,
        outer_steps: 25,
        learning_rate: 0.1,
        seed: 11,
        ..TrainConfig::default()
    };
    let initial = Policy::zeros(
        FeatureMap::prompt_unigram(task.num_classes(), task.vocab().size()),
        task.vocab(),
        task.max_len(),
    );

    // First leg: train, then persist the final weights.
    let first = run_rapid(&config, &task, &initial)?;
    let dir = std::env::temp_dir().join("rapid_checkpoint_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("leg1.bin");
    let checkpoint =
        Checkpoint::from_policy(&first.policy, task.name(), first.counters.gradient_steps);
    save_checkpoint(&path, &checkpoint)?;
    println!(
        "saved {} weights after {} steps to {}",
        checkpoint.theta.len(),
        checkpoint.step,
        path.display()
    );
    println!("sidecar: {}", path.with_extension("txt").display());

    // Later: load, rebuild the policy, and keep training.
    let restored = load_checkpoint(&path)?;
    assert_eq!(restored.theta, first.policy.theta(), "weights round-trip bitwise");
    let resumed_policy = Policy::new(
        *first.policy.map(),
        first.policy.vocab(),
        first.policy.max_len(),
        restored.theta,
    );
    let second_config = TrainConfig { seed: 12, ..config };
    let second = run_rapid(&second_config, &task, &resumed_policy)?;

    let j0 = exact_objective(&initial, &task, DEFAULT_ENUMERATION_CAP)?;
    let j1 = exact_objective(&first.policy, &task, DEFAULT_ENUMERATION_CAP)?;
    let j2 = exact_objective(&second.policy, &task, DEFAULT_ENUMERATION_CAP)?;
    println!("\nexact objective: start {j0:.4} -> leg 1 {j1:.4} -> leg 2 {j2:.4}");
    println!(
        "leg 2 resumed from step {} and ran {} more",
        restored.step, second.counters.gradient_steps
    );
    Ok(())
}
