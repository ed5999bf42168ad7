//! Acceptance checks for the whole crate, one test per criterion.
//!
//! Each test prints one `ACCEPTANCE nn PASS/FAIL` line (visible with
//! `--nocapture`, or automatically when a criterion fails) and asserts
//! the stated tolerance. Tolerances and time budgets are part of the
//! contract; loosening them here is cheating.

use rapid_rl::{
    estimator_expectation, estimator_mc, exact_gradient, exact_objective, grpg_gradient,
    iw_grpg_gradient, pearson, run_onpolicy_grpg, run_rapid, run_with_observer, Algorithm,
    ClipConfig, CostModel, EstimatorSpec, FeatureMap, GradientVector, GroupBatch, Policy, Prompt,
    RunOutput, Sample, Task, TrainConfig, Vocab, DEFAULT_ENUMERATION_CAP, DEFAULT_JOINT_CAP,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn conclude(criterion: u32, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {criterion:02} {status}: {detail}");
    assert!(pass, "ACCEPTANCE {criterion:02} {status}: {detail}");
}

/// Single-prompt bandit over two tokens: reward 1 iff token 0.
fn bandit_task() -> Task {
    Task::custom(
        "bandit",
        Vocab::new(2),
        1,
        vec![Prompt { id: 0, class: 0, payload: vec![] }],
        |_, tokens| if tokens == [0] { 1.0 } else { 0.0 },
    )
}

/// Bandit policy with probability `p` on token 0.
fn bandit_policy(p: f64) -> Policy {
    let logit = (p / (1.0 - p)).ln();
    Policy::new(FeatureMap::prompt_unigram(1, 2), Vocab::new(2), 1, vec![logit, 0.0])
}

/// Two-prompt, two-token, two-step task with graded rewards.
fn two_step_task() -> Task {
    Task::custom(
        "two_step",
        Vocab::new(2),
        2,
        vec![
            Prompt { id: 0, class: 0, payload: vec![] },
            Prompt { id: 1, class: 1, payload: vec![] },
        ],
        |prompt, tokens| {
            let ones = tokens.iter().filter(|&&t| t == 1).count() as f64;
            if prompt.class == 0 { ones / 2.0 } else { 1.0 - ones / 2.0 }
        },
    )
}

fn two_step_policy(scale: f64) -> Policy {
    let map = FeatureMap::tabular_bigram(2, 2, 2);
    let theta: Vec<f64> =
        (0..map.dimension()).map(|i| scale * ((i % 7) as f64 - 3.0) / 10.0).collect();
    Policy::new(map, Vocab::new(2), 2, theta)
}

#[test]
fn criterion_01_exact_unbiasedness_on_enumerable_instances() {
    let start = Instant::now();
    let spec = EstimatorSpec::loo_unclipped();
    let mut worst = 0.0f64;
    let mut instances = 0u32;

    // Bandit instances: vocab 2, one token, assorted policy pairs.
    let task = bandit_task();
    for policy_p in [0.5, 0.6, 0.75] {
        for behavior_p in [0.5, 0.4] {
            let policy = bandit_policy(policy_p);
            let behavior = bandit_policy(behavior_p);
            let truth = exact_gradient(&policy, &task, DEFAULT_JOINT_CAP).unwrap();
            for group in [2usize, 3] {
                let e =
                    estimator_expectation(&spec, &policy, &behavior, &task, group, DEFAULT_JOINT_CAP)
                        .unwrap();
                worst = worst.max(e.max_abs_diff(&truth));
                instances += 1;
            }
        }
    }

    // Two-step instances: vocab 2, max_len 2, bigram policies, two prompts.
    let task = two_step_task();
    for (policy_scale, behavior_scale) in [(1.0, 0.0), (1.0, -0.6), (0.3, 1.0)] {
        let policy = two_step_policy(policy_scale);
        let behavior = two_step_policy(behavior_scale);
        let truth = exact_gradient(&policy, &task, DEFAULT_JOINT_CAP).unwrap();
        for group in [2usize, 3] {
            let e =
                estimator_expectation(&spec, &policy, &behavior, &task, group, DEFAULT_JOINT_CAP)
                    .unwrap();
            worst = worst.max(e.max_abs_diff(&truth));
            instances += 1;
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    conclude(
        1,
        worst <= 1e-8 && elapsed < 60.0,
        &format!(
            "leave-one-out expectation vs oracle over {instances} enumerable instances: \
             max deviation {worst:.3e} (tolerance 1e-8), {elapsed:.1}s (budget 60s)"
        ),
    );
}

#[test]
fn criterion_02_monte_carlo_convergence() {
    let start = Instant::now();
    let task = bandit_task();
    let policy = bandit_policy(0.6);
    let behavior = bandit_policy(0.5);
    let truth = exact_gradient(&policy, &task, DEFAULT_JOINT_CAP).unwrap();
    let spec = EstimatorSpec::loo_unclipped();
    let mc = estimator_mc(&spec, &policy, &behavior, &task, 4, 200_000, 123).unwrap();
    let cosine = mc.mean.cosine(&truth).unwrap_or(-1.0);
    let mut diff = mc.mean.clone();
    diff.add_scaled(&truth, -1.0);
    let rel_l2 = diff.norm() / truth.norm();
    let elapsed = start.elapsed().as_secs_f64();
    conclude(
        2,
        cosine >= 0.99 && rel_l2 <= 0.05 && elapsed < 60.0,
        &format!(
            "200000 leave-one-out estimates on the 0.6-vs-uniform bandit: cosine \
             {cosine:.5} (>= 0.99), relative L2 {rel_l2:.5} (<= 0.05), {elapsed:.1}s \
             (budget 60s)"
        ),
    );
}

#[test]
fn criterion_03_on_policy_reduction() {
    // Part one: estimator identity on 100 random on-policy batches.
    let task = Task::last_token_match(4, 4, 2, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut worst_batch = 0.0f64;
    for _ in 0..100 {
        let map = FeatureMap::prompt_unigram(task.num_classes(), 4);
        let theta: Vec<f64> = (0..map.dimension()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let policy = Policy::new(map, task.vocab(), task.max_len(), theta);
        let mut groups = Vec::new();
        for (slot, prompt) in task.prompts().iter().enumerate() {
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
            groups.push(GroupBatch::new(samples).unwrap());
        }
        let plain = grpg_gradient(&groups, &policy).unwrap();
        let weighted =
            iw_grpg_gradient(&groups, &policy, &ClipConfig::off(), false, true).unwrap();
        worst_batch = worst_batch.max(plain.max_abs_diff(&weighted));
    }

    // Part two: H=1 training trajectories agree step for step.
    let task = Task::last_token_match(4, 4, 1, 3).unwrap();
    let config = TrainConfig {
        n_inference: 16,
        n_group: 4,
        n_step: 16,
        outer_steps: 10,
        seed: 5,
        ..TrainConfig::default()
    };
    let initial = Policy::zeros(
        FeatureMap::prompt_unigram(task.num_classes(), 4),
        task.vocab(),
        task.max_len(),
    );
    let trajectory = |algorithm: Algorithm| -> Vec<Vec<f64>> {
        let mut steps = Vec::new();
        run_with_observer(
            &TrainConfig { algorithm, ..config.clone() },
            &task,
            &initial,
            |event| {
                steps.push(event.policy.theta().to_vec());
                Ok(())
            },
        )
        .unwrap();
        steps
    };
    let rapid = trajectory(Algorithm::Rapid);
    let grpg = trajectory(Algorithm::OnPolicyGrpg);
    let mut worst_traj = 0.0f64;
    assert_eq!(rapid.len(), grpg.len());
    for (a, b) in rapid.iter().zip(&grpg) {
        let a = GradientVector(a.clone());
        let b = GradientVector(b.clone());
        worst_traj = worst_traj.max(a.max_abs_diff(&b));
    }

    conclude(
        3,
        worst_batch <= 1e-12 && worst_traj <= 1e-12,
        &format!(
            "on-policy: weighted vs plain gradient max deviation {worst_batch:.3e} over \
             100 random batches; H=1 vs on-policy weight trajectories max deviation \
             {worst_traj:.3e} over {} steps (tolerance 1e-12)",
            rapid.len()
        ),
    );
}

#[test]
fn criterion_04_self_inclusion_bias_direction() {
    let task = bandit_task();
    let policy = bandit_policy(0.75);
    let behavior = bandit_policy(0.5);
    let truth = exact_gradient(&policy, &task, DEFAULT_JOINT_CAP).unwrap();
    let spec = EstimatorSpec {
        leave_one_out: false,
        clip_leading: false,
        ..EstimatorSpec::full_group(ClipConfig::off())
    };
    let bias = |group: usize| -> f64 {
        let mut e =
            estimator_expectation(&spec, &policy, &behavior, &task, group, DEFAULT_JOINT_CAP)
                .unwrap();
        e.add_scaled(&truth, -1.0);
        e.norm()
    };
    let b2 = bias(2);
    let b3 = bias(3);
    conclude(
        4,
        b3 < b2,
        &format!(
            "full-group bias norm on the reference bandit: {b3:.6} at group size 3 vs \
             {b2:.6} at group size 2 (must shrink)"
        ),
    );
}

#[test]
fn criterion_05_training_efficacy() {
    let start = Instant::now();
    let task = Task::last_token_match(8, 16, 2, 0).unwrap();
    let initial = Policy::zeros(
        FeatureMap::prompt_unigram(task.num_classes(), task.vocab().size()),
        task.vocab(),
        task.max_len(),
    );
    let final_j = |out: &RunOutput| -> f64 {
        exact_objective(&out.policy, &task, DEFAULT_ENUMERATION_CAP).unwrap()
    };

    let seeds = [0u64, 1, 2];
    let mut rapid_sum = 0.0;
    let mut grpg_sum = 0.0;
    for seed in seeds {
        // 125 phases x H=4 steps = 500 gradient steps with eta = 2.0 cap.
        let stale = TrainConfig {
            n_inference: 64,
            n_group: 4,
            n_step: 16,
            outer_steps: 125,
            learning_rate: 1.0,
            clip: ClipConfig::cap(2.0),
            seed,
            ..TrainConfig::default()
        };
        rapid_sum += final_j(&run_rapid(&stale, &task, &initial).unwrap());
        // The same 500-step budget, resampling before every step.
        let fresh = TrainConfig {
            algorithm: Algorithm::OnPolicyGrpg,
            n_inference: 16,
            outer_steps: 500,
            ..stale
        };
        grpg_sum += final_j(&run_onpolicy_grpg(&fresh, &task, &initial).unwrap());
    }
    let rapid_avg = rapid_sum / seeds.len() as f64;
    let grpg_avg = grpg_sum / seeds.len() as f64;
    let elapsed = start.elapsed().as_secs_f64();
    conclude(
        5,
        rapid_avg >= 0.90 && grpg_avg - rapid_avg <= 0.03 && elapsed < 300.0,
        &format!(
            "500-step H=4 runs over 3 seeds: mean exact reward {rapid_avg:.4} (>= 0.90), \
             on-policy baseline {grpg_avg:.4} (gap <= 0.03), {elapsed:.1}s (budget 300s)"
        ),
    );
}

/// Shared sweep for criteria 6 and 7: H in {2,4,8,16}, three seeds, a
/// fixed 240-step budget, and four-token sequences at a learning rate
/// hot enough that the H=8 cells actually clip against eta = 2.
fn staleness_sweep(clip: ClipConfig) -> Vec<(usize, u64, RunOutput)> {
    let task = Task::last_token_match(8, 16, 4, 0).unwrap();
    let initial = Policy::zeros(
        FeatureMap::prompt_unigram(task.num_classes(), task.vocab().size()),
        task.vocab(),
        task.max_len(),
    );
    let mut cells = Vec::new();
    for h in [2usize, 4, 8, 16] {
        for seed in [0u64, 1, 2] {
            let config = TrainConfig {
                n_inference: h * 16,
                n_group: 4,
                n_step: 16,
                outer_steps: 240 / h,
                learning_rate: 2.0,
                clip,
                seed,
                ..TrainConfig::default()
            };
            cells.push((h, seed, run_rapid(&config, &task, &initial).unwrap()));
        }
    }
    cells
}

fn mean_staleness(out: &RunOutput) -> f64 {
    out.metrics.iter().map(|r| r.staleness).sum::<f64>() / out.metrics.len() as f64
}

#[test]
fn criterion_06_staleness_correlation() {
    let cells = staleness_sweep(ClipConfig::cap(2.0));
    let hs: Vec<f64> = cells.iter().map(|(h, _, _)| *h as f64).collect();
    let drifts: Vec<f64> = cells.iter().map(|(_, _, out)| mean_staleness(out)).collect();
    let r = pearson(&hs, &drifts).unwrap();
    let per_h = |target: usize| -> f64 {
        let vals: Vec<f64> = cells
            .iter()
            .filter(|(h, _, _)| *h == target)
            .map(|(_, _, out)| mean_staleness(out))
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let low = per_h(2);
    let high = per_h(16);
    conclude(
        6,
        r >= 0.7 && low < high,
        &format!(
            "H in {{2,4,8,16}} x 3 seeds: r(H, staleness) = {r:.4} (>= 0.7), per-H mean \
             staleness {low:.5} at H=2 vs {high:.5} at H=16 (must grow)"
        ),
    );
}

#[test]
fn criterion_07_clip_fraction_behavior() {
    let capped = staleness_sweep(ClipConfig::cap(2.0));
    let h8: Vec<&RunOutput> =
        capped.iter().filter(|(h, _, _)| *h == 8).map(|(_, _, out)| out).collect();
    let mean_clip = |out: &RunOutput| -> f64 {
        out.metrics.iter().map(|r| r.clip_fraction).sum::<f64>() / out.metrics.len() as f64
    };
    let capped_mean = h8.iter().map(|out| mean_clip(out)).sum::<f64>() / h8.len() as f64;

    let unbounded = staleness_sweep(ClipConfig::cap(f64::INFINITY));
    let free_max = unbounded
        .iter()
        .filter(|(h, _, _)| *h == 8)
        .flat_map(|(_, _, out)| out.metrics.iter())
        .map(|r| r.clip_fraction)
        .fold(0.0f64, f64::max);

    conclude(
        7,
        capped_mean > 0.0 && capped_mean < 0.5 && free_max == 0.0,
        &format!(
            "H=8 cells: mean clip fraction {capped_mean:.4} under eta=2 cap (must be in \
             (0, 0.5)); max clip fraction {free_max} with unbounded eta (must be exactly 0)"
        ),
    );
}

#[test]
fn criterion_08_inference_cost_reduction() {
    // A real H=8 run, priced by the default model.
    let task = Task::last_token_match(8, 16, 2, 0).unwrap();
    let config = TrainConfig {
        n_inference: 128,
        n_group: 4,
        n_step: 16,
        outer_steps: 5,
        ..TrainConfig::default()
    };
    let initial = Policy::zeros(
        FeatureMap::prompt_unigram(task.num_classes(), task.vocab().size()),
        task.vocab(),
        task.max_len(),
    );
    let out = run_rapid(&config, &task, &initial).unwrap();

    // The naive schedule samples fresh before each of the 40 steps,
    // producing the same 640 generations in 40 small launches.
    let model = CostModel::default();
    let steps = config.total_steps() as u64;
    let naive = steps as f64 * model.inference_seconds(1, config.n_step as u64);
    let amortized = out.counters.sim_inference_seconds;
    assert_eq!(
        steps * config.n_step as u64,
        out.counters.total_generations,
        "schedules must price the same generation count"
    );
    let reduction = 1.0 - amortized / naive;

    // The run summary must state the cost model it priced with.
    let records = out.metrics.clone();
    let spec = rapid_rl::cli::cfgfile::load(None, &[], None, None).unwrap();
    let checkpoint = rapid_rl::Checkpoint::from_policy(
        &out.policy,
        task.name(),
        out.counters.gradient_steps,
    );
    let mut spec = spec;
    spec.train = config.clone();
    let summary = rapid_rl::cli::report::summarize_run(&spec, &records, &checkpoint).unwrap();
    let rendered = serde_json::to_string(&summary).unwrap();
    let states_model = rendered.contains("\"a_inf\":10.0")
        && rendered.contains("\"b_inf\":0.05")
        && summary.cost_model == model;

    conclude(
        8,
        reduction >= 0.30 && states_model,
        &format!(
            "H=8 simulated inference {amortized:.1}s vs per-step schedule {naive:.1}s: \
             {:.1}% reduction (>= 30%); summary records the cost model: {states_model}",
            100.0 * reduction
        ),
    );
}

#[test]
fn criterion_09_structural_accounting() {
    let task = Task::last_token_match(8, 16, 2, 0).unwrap();
    let config = TrainConfig {
        n_inference: 64,
        n_group: 4,
        n_step: 16,
        outer_steps: 5,
        ..TrainConfig::default()
    };
    let initial = Policy::zeros(
        FeatureMap::prompt_unigram(task.num_classes(), task.vocab().size()),
        task.vocab(),
        task.max_len(),
    );
    let out = run_rapid(&config, &task, &initial).unwrap();

    let steps = out.metrics.len();
    let snapshots = {
        let mut outers: Vec<u64> = out.metrics.iter().map(|r| r.outer_step).collect();
        outers.dedup();
        outers.len()
    };
    let generations = out.counters.total_generations;
    conclude(
        9,
        steps == 20 && snapshots == 5 && generations == 320 && out.counters.snapshots == 5,
        &format!(
            "T=5, 64/4/16 run: {generations} generations (want 320), {snapshots} snapshots \
             (want 5), {steps} gradient steps in the metrics (want 20)"
        ),
    );
}

#[test]
fn criterion_10_byte_identical_metrics() {
    let exe = env!("CARGO_BIN_EXE_rapid");
    let root = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Vec<u8> {
        let dir = root.path().join(name);
        let status = std::process::Command::new(exe)
            .args([
                "train",
                "--seed",
                "4",
                "--set",
                "outer_steps=5",
                "--set",
                "oracle_cadence=5",
                "--out",
            ])
            .arg(&dir)
            .status()
            .unwrap();
        assert!(status.success(), "training run failed");
        std::fs::read(dir.join("metrics.csv")).unwrap()
    };
    let first = run("first");
    let second = run("second");
    let identical = first == second;
    conclude(
        10,
        identical && !first.is_empty(),
        &format!(
            "same config and seed run twice through the binary: metrics.csv identical: \
             {identical} ({} bytes)",
            first.len()
        ),
    );
}
