//! Sweep the batch-size ratio H and correlate it with policy drift.
//!
//! Every run gets the same total gradient-step budget and the same
//! mini-batch size; H only controls how many of those steps reuse one
//! sampling phase. Larger H means staler data, visible as a growing mean
//! absolute log importance weight. Run with
//! `cargo run --example sweep_batch_ratio`.

use rapid_rl::{pearson, run_rapid, FeatureMap, Policy, Task, TrainConfig};

fn main() -> rapid_rl::Result<()> {
    let task = Task::last_token_match(8, 16, 2, 0)?;
    let policy = Policy::zeros(
        FeatureMap::prompt_unigram(task.num_classes(), task.vocab().size()),
        task.vocab(),
        task.max_len(),
    );
    let budget = 240;
    let seeds = [0u64, 1, 2];

    let mut hs = Vec::new();
    let mut drifts = Vec::new();
    println!("   H  seed  mean drift  final reward");
    for h in [2usize, 4, 8, 16] {
        for seed in seeds {
            let config = TrainConfig {
                n_inference: h * 16,
                n_group: 4,
                n_step: 16,
                outer_steps: budget / h,
                learning_rate: 0.1,
                seed,
                ..TrainConfig::default()
            };
            let out = run_rapid(&config, &task, &policy)?;
            let drift = out.metrics.iter().map(|r| r.staleness).sum::<f64>()
                / out.metrics.len() as f64;
            println!(
                "{h:>4}  {seed:>4}  {drift:>10.5}  {:>12.4}",
                out.metrics.last().unwrap().mean_reward
            );
            hs.push(h as f64);
            drifts.push(drift);
        }
    }

    let r = pearson(&hs, &drifts)?;
    println!("\nPearson r(H, drift) over {} runs: {r:.3}", hs.len());
    println!("reusing one batch for more steps lets the policy walk further from it");
    Ok(())
}
