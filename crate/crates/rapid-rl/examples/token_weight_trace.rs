//! Watch importance weights drift token by token within one phase.
//!
//! During an inference phase the sampler's policy is frozen, but every
//! inner gradient step moves the learner away from it. The per-token log
//! ratio ln pi_theta(y_t) - ln mu(y_t) starts at exactly zero and spreads
//! out as the phase ages; its sequence sum is the sample's log importance
//! weight. Run with `cargo run --example token_weight_trace`.

use rapid_rl::{
    run_with_observer, token_weight_trace, FeatureMap, Policy, Task, TrainConfig,
};

fn main() -> rapid_rl::Result<()> {
    let task = Task::last_token_match(8, 8, 4, 1)?;
    let config = TrainConfig {
        n_inference: 64,
        n_group: 4,
        n_step: 8,
        outer_steps: 1,
        learning_rate: 0.3,
        seed: 9,
        ..TrainConfig::default()
    };
    let policy = Policy::zeros(
        FeatureMap::tabular_bigram(task.num_classes(), task.vocab().size(), task.max_len()),
        task.vocab(),
        task.max_len(),
    );

    println!("one phase, H = {} inner steps, 4-token sequences", config.h());
    println!("per-token log ratio of the first sample in each mini-batch:\n");
    println!("step  drift    tokens -> log ratios");
    run_with_observer(&config, &task, &policy, |event| {
        let sample = &event.minibatch[0].samples()[0];
        // The post-update policy scores the tokens the frozen sampler chose.
        let trace = token_weight_trace(sample, event.policy)?;
        let cells: Vec<String> = sample
            .generation
            .tokens
            .iter()
            .zip(&trace)
            .map(|(t, r)| format!("{t}:{r:+.4}"))
            .collect();
        println!(
            "{:>4}  {:.5}  {}  (sum {:+.4})",
            event.record.global_step,
            event.record.staleness,
            cells.join("  "),
            trace.iter().sum::<f64>(),
        );
        Ok(())
    })?;

    println!("\nthe first step's drift is exactly zero: nothing has moved yet;");
    println!("after that the trace sums equal the samples' log importance weights");
    Ok(())
}
