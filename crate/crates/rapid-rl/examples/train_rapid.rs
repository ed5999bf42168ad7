//! Train a policy with the alternating-phase schedule and watch the
//! metrics evolve.
//!
//! Each outer step samples one large batch (64 generations here), then
//! takes H = 4 gradient steps on disjoint mini-batches of it before
//! resampling. Run with `cargo run --example train_rapid`.

use rapid_rl::{run_rapid, FeatureMap, Policy, Task, TrainConfig};

fn main() -> rapid_rl::Result<()> {
    let task = Task::last_token_match(8, 16, 2, 0)?;
    let config = TrainConfig {
        n_inference: 64,
        n_group: 4,
        n_step: 16,
        outer_steps: 50,
        learning_rate: 0.1,
        oracle_cadence: 20,
        seed: 7,
        ..TrainConfig::default()
    };
    let policy = Policy::zeros(
        FeatureMap::prompt_unigram(task.num_classes(), task.vocab().size()),
        task.vocab(),
        task.max_len(),
    );

    println!(
        "task {}: {} prompts, vocab {}, sequences up to {} tokens",
        task.name(),
        task.prompts().len(),
        task.vocab().size(),
        task.max_len()
    );
    println!(
        "schedule: {} phases x {} generations, H = {} updates per phase\n",
        config.outer_steps,
        config.n_inference,
        config.h()
    );

    let out = run_rapid(&config, &task, &policy)?;

    println!("step  reward  drift    clipped  exact J");
    for record in out.metrics.iter().filter(|r| r.global_step % 20 == 0) {
        println!(
            "{:>4}  {:.4}  {:.5}  {:.4}   {}",
            record.global_step,
            record.mean_reward,
            record.staleness,
            record.clip_fraction,
            record.oracle_j.map_or_else(|| "-".to_string(), |j| format!("{j:.4}")),
        );
    }

    println!(
        "\nsampled {} generations across {} snapshots, {} gradient steps",
        out.counters.total_generations, out.counters.snapshots, out.counters.gradient_steps
    );
    println!(
        "exact objective: {:.4} -> {:.4}",
        out.initial_oracle_j.unwrap_or(f64::NAN),
        out.final_oracle_j.unwrap_or(f64::NAN)
    );
    println!(
        "simulated cost: {:.1}s inference + {:.1}s backprop",
        out.counters.sim_inference_seconds, out.counters.sim_backprop_seconds
    );
    Ok(())
}
