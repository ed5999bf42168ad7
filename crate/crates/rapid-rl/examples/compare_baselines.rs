//! Compare the off-policy schedule against its on-policy and
//! KL-regularized baselines at a matched gradient-step budget.
//!
//! All three runs take 200 gradient steps on mini-batches of 16; they
//! differ in how often they resample. The off-policy schedule samples
//! once per 8 steps and pays for it with importance weighting, so it
//! should land near the on-policy result at a fraction of the simulated
//! inference cost. Run with `cargo run --example compare_baselines`.

use rapid_rl::{
    run_grpo_kl, run_onpolicy_grpg, run_rapid, Algorithm, FeatureMap, Policy, RunOutput, Task,
    TrainConfig,
};

fn report(label: &str, out: &RunOutput) {
    println!(
        "{label:<16} {:>7.4} {:>9.4} {:>12.1} {:>12.1}",
        out.metrics.last().unwrap().mean_reward,
        out.final_oracle_j.unwrap_or(f64::NAN),
        out.counters.sim_inference_seconds,
        out.counters.sim_backprop_seconds,
    );
}

fn main() -> rapid_rl::Result<()> {
    let task = Task::last_token_match(8, 16, 2, 0)?;
    let policy = Policy::zeros(
        FeatureMap::prompt_unigram(task.num_classes(), task.vocab().size()),
        task.vocab(),
        task.max_len(),
    );

    // 25 phases x H=8 steps for the off-policy run; the on-policy run
    // resamples before every one of its 200 steps instead.
    let stale = TrainConfig {
        n_inference: 128,
        n_group: 4,
        n_step: 16,
        outer_steps: 25,
        learning_rate: 0.1,
        oracle_cadence: 200,
        seed: 3,
        ..TrainConfig::default()
    };
    let fresh = TrainConfig {
        algorithm: Algorithm::OnPolicyGrpg,
        n_inference: 16,
        outer_steps: 200,
        ..stale.clone()
    };
    let regularized = TrainConfig { beta_kl: 0.04, ..stale.clone() };

    println!("algorithm         reward   exact J    inference s   backprop s");
    report("rapid H=8", &run_rapid(&stale, &task, &policy)?);
    report("grpg on-policy", &run_onpolicy_grpg(&fresh, &task, &policy)?);
    report("grpo-kl H=8", &run_grpo_kl(&regularized, &task, &policy)?);

    println!(
        "\nthe stale schedule runs {} inference phases where on-policy runs {},",
        stale.outer_steps, fresh.outer_steps
    );
    println!("which is where the inference-second gap comes from");
    Ok(())
}
