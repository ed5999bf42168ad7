//! Run and sweep summaries.
//!
//! A summary is a pure function of the artifacts a run leaves behind
//! (resolved.cfg, metrics.csv, checkpoint_final.bin), so the report
//! command can regenerate it byte for byte after the fact. Sweep
//! summaries aggregate per-cell summaries plus correlations between the
//! batch-size ratio and the observed drift, reward, and cost.

use super::cfgfile::RunSpec;
use crate::error::{Error, Result};
use crate::metrics::{pass_at_k, pearson, CostModel, MetricsRecord};
use crate::task::Task;
use crate::trainer::{derive_rng, Checkpoint, PURPOSE_EVAL};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Reward above this counts as a success for pass@k evaluation.
pub const SUCCESS_THRESHOLD: f64 = 0.5;

/// How many generations per prompt the post-run evaluation samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub generations_per_prompt: usize,
    pub success_threshold: f64,
    pub pass_at_1: f64,
    pub pass_at_g: f64,
}

/// The run-level summary serialized as summary.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: String,
    pub algorithm: String,
    pub n_inference: usize,
    pub n_group: usize,
    pub n_step: usize,
    pub outer_steps: usize,
    pub h: usize,
    pub seed: u64,
    pub gradient_steps: u64,
    pub total_generations: u64,
    pub snapshots: u64,
    pub records_in_csv: usize,
    pub final_mean_reward: f64,
    pub final_oracle_j: Option<f64>,
    pub mean_staleness: f64,
    pub mean_staleness_signed: f64,
    pub mean_clip_fraction: f64,
    pub total_sim_cost: f64,
    pub sim_inference_seconds: f64,
    pub sim_backprop_seconds: f64,
    pub cost_model: CostModel,
    pub eval: EvalSummary,
}

/// Deterministic post-run evaluation: sample `n_group` generations per
/// prompt from the final policy on a dedicated stream and score pass@1
/// and pass@G with rewards above [`SUCCESS_THRESHOLD`] as successes.
fn evaluate_pass_rates(
    spec: &RunSpec,
    task: &Task,
    checkpoint: &Checkpoint,
) -> Result<(f64, f64)> {
    let policy = spec.policy_from_theta(task, checkpoint.theta.clone())?;
    let g = spec.train.n_group;
    let mut flags = Vec::with_capacity(task.prompts().len());
    for prompt in task.prompts() {
        let mut rng = derive_rng(spec.train.seed, PURPOSE_EVAL, prompt.id as u64, 0);
        let prompt_flags: Vec<bool> = (0..g)
            .map(|_| {
                let generation = policy.sample_generation(prompt, &mut rng);
                task.reward_for(prompt, &generation.tokens) > SUCCESS_THRESHOLD
            })
            .collect();
        flags.push(prompt_flags);
    }
    Ok((pass_at_k(&flags, 1)?, pass_at_k(&flags, g)?))
}

/// Builds the summary from a run's spec, its (cadence-filtered) metrics,
/// and the final checkpoint. Every input is persisted on disk, so
/// recomputing later yields the identical summary.
pub fn summarize_run(
    spec: &RunSpec,
    records: &[MetricsRecord],
    checkpoint: &Checkpoint,
) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(Error::config("metrics contain no records to summarize"));
    }
    let task = spec.build_task()?;
    let last = records.last().unwrap();
    let n = records.len() as f64;
    let mean = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let (pass_at_1, pass_at_g) = evaluate_pass_rates(spec, &task, checkpoint)?;
    let train = &spec.train;
    let total_steps = train.total_steps() as u64;
    Ok(RunSummary {
        task: spec.task_name.clone(),
        algorithm: train.algorithm.as_str().to_string(),
        n_inference: train.n_inference,
        n_group: train.n_group,
        n_step: train.n_step,
        outer_steps: train.outer_steps,
        h: train.h(),
        seed: train.seed,
        gradient_steps: total_steps,
        total_generations: (train.outer_steps * train.n_inference) as u64,
        snapshots: train.outer_steps as u64,
        records_in_csv: records.len(),
        final_mean_reward: last.mean_reward,
        final_oracle_j: last.oracle_j,
        mean_staleness: mean(|r| r.staleness),
        mean_staleness_signed: mean(|r| r.staleness_signed),
        mean_clip_fraction: mean(|r| r.clip_fraction),
        total_sim_cost: last.sim_cost,
        sim_inference_seconds: train.outer_steps as f64
            * train.cost.inference_seconds(1, train.n_inference as u64),
        sim_backprop_seconds: total_steps as f64
            * train.cost.backprop_seconds(1, train.n_step as u64),
        cost_model: train.cost,
        eval: EvalSummary {
            generations_per_prompt: train.n_group,
            success_threshold: SUCCESS_THRESHOLD,
            pass_at_1,
            pass_at_g,
        },
    })
}

/// Serializes a summary with a stable layout (pretty JSON, trailing
/// newline), so equal summaries are byte-equal files.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Sweep bookkeeping persisted at the sweep root; together with the
/// cells' own artifacts it is enough to regenerate the sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub h_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub gradient_step_budget: usize,
    pub cells: Vec<ManifestCell>,
}

/// One planned cell: where it ran and whether it completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCell {
    pub h: usize,
    pub seed: u64,
    /// Cell directory, relative to the sweep root.
    pub dir: String,
    pub status: String,
}

/// One sweep cell's identity and outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub h: usize,
    pub seed: u64,
    pub dir: String,
    /// "ok" or "failed: reason"; failed cells are excluded from
    /// aggregates but keep their slot in the listing.
    pub status: String,
    pub final_mean_reward: Option<f64>,
    pub final_oracle_j: Option<f64>,
    pub mean_staleness: Option<f64>,
    pub mean_clip_fraction: Option<f64>,
    pub total_sim_cost: Option<f64>,
}

/// Per-H aggregate over seeds. Standard deviations are population
/// deviations over the completed cells, so a single seed reports 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGroup {
    pub h: usize,
    pub completed: usize,
    pub mean_final_reward: f64,
    pub std_final_reward: f64,
    pub mean_staleness: f64,
    pub std_staleness: f64,
    pub mean_clip_fraction: f64,
    pub mean_sim_cost: f64,
}

/// The sweep-level summary serialized as sweep_summary.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub task: String,
    pub algorithm: String,
    pub n_step: usize,
    pub n_group: usize,
    pub gradient_step_budget: usize,
    pub h_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub cost_model: CostModel,
    pub cells: Vec<SweepCell>,
    pub per_h: Vec<SweepGroup>,
    /// Pearson correlations over completed cells; absent when undefined
    /// (fewer than two points or a constant series).
    pub r_h_staleness: Option<f64>,
    pub r_h_final_reward: Option<f64>,
    pub r_h_sim_cost: Option<f64>,
}

fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates cells into per-H groups and H correlations. `base` is the
/// sweep's shared spec (n_step, task, algorithm); cells supply their own
/// H and seed.
pub fn summarize_sweep(
    base: &RunSpec,
    budget: usize,
    h_values: &[usize],
    seeds: &[u64],
    cells: Vec<SweepCell>,
) -> SweepSummary {
    let mut per_h = Vec::new();
    for &h in h_values {
        let done: Vec<&SweepCell> = cells
            .iter()
            .filter(|c| c.h == h && c.status == "ok")
            .collect();
        if done.is_empty() {
            continue;
        }
        let collect = |f: fn(&SweepCell) -> Option<f64>| -> Vec<f64> {
            done.iter().filter_map(|c| f(c)).collect()
        };
        let rewards = collect(|c| c.final_mean_reward);
        let staleness = collect(|c| c.mean_staleness);
        let clip = collect(|c| c.mean_clip_fraction);
        let cost = collect(|c| c.total_sim_cost);
        let (mean_final_reward, std_final_reward) = mean_and_population_std(&rewards);
        let (mean_staleness, std_staleness) = mean_and_population_std(&staleness);
        per_h.push(SweepGroup {
            h,
            completed: done.len(),
            mean_final_reward,
            std_final_reward,
            mean_staleness,
            std_staleness,
            mean_clip_fraction: clip.iter().sum::<f64>() / clip.len() as f64,
            mean_sim_cost: cost.iter().sum::<f64>() / cost.len() as f64,
        });
    }

    let points = |f: fn(&SweepCell) -> Option<f64>| -> (Vec<f64>, Vec<f64>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for cell in cells.iter().filter(|c| c.status == "ok") {
            if let Some(y) = f(cell) {
                xs.push(cell.h as f64);
                ys.push(y);
            }
        }
        (xs, ys)
    };
    let correlate = |f: fn(&SweepCell) -> Option<f64>| -> Option<f64> {
        let (xs, ys) = points(f);
        pearson(&xs, &ys).ok()
    };
    let r_h_staleness = correlate(|c| c.mean_staleness);
    let r_h_final_reward = correlate(|c| c.final_mean_reward);
    let r_h_sim_cost = correlate(|c| c.total_sim_cost);

    SweepSummary {
        task: base.task_name.clone(),
        algorithm: base.train.algorithm.as_str().to_string(),
        n_step: base.train.n_step,
        n_group: base.train.n_group,
        gradient_step_budget: budget,
        h_values: h_values.to_vec(),
        seeds: seeds.to_vec(),
        cost_model: base.train.cost,
        cells,
        per_h,
        r_h_staleness,
        r_h_final_reward,
        r_h_sim_cost,
    }
}

/// Derives a sweep cell row from a completed run's summary.
pub fn cell_from_summary(h: usize, seed: u64, dir: String, summary: &RunSummary) -> SweepCell {
    SweepCell {
        h,
        seed,
        dir,
        status: "ok".to_string(),
        final_mean_reward: Some(summary.final_mean_reward),
        final_oracle_j: summary.final_oracle_j,
        mean_staleness: Some(summary.mean_staleness),
        mean_clip_fraction: Some(summary.mean_clip_fraction),
        total_sim_cost: Some(summary.total_sim_cost),
    }
}
