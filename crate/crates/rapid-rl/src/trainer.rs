//! Training loops: alternating-phase off-policy training, the on-policy
//! group-relative baseline, and the KL-regularized variant.
//!
//! One outer step samples a large inference batch under the current
//! policy, snapshots that policy as the behavior reference, then takes
//! several gradient steps on mini-batches that partition the batch.
//! Every random choice flows through a stream derived from the run seed
//! plus a purpose tag and step coordinates, so runs are reproducible
//! regardless of how sampling work is scheduled across threads.

use crate::error::{Error, Result};
use crate::estimator::{
    grpg_gradient, iw_grpg_gradient, kl_regularized_gradient, ClipConfig, GroupBatch, Sample,
};
use crate::metrics::{
    clip_fraction, staleness, staleness_signed, CostModel, MetricsRecord,
};
use crate::oracle::exact_objective;
use crate::policy::{GradientVector, Policy, DEFAULT_ENUMERATION_CAP};
use crate::task::Task;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Which training loop a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Large inference batches, importance-weighted group-relative
    /// mini-batch updates.
    Rapid,
    /// Sample, take one step, resample: requires n_inference == n_step.
    #[serde(rename = "grpg_onpolicy")]
    OnPolicyGrpg,
    /// Same batching as `Rapid` but unweighted advantages plus a KL
    /// penalty against the phase snapshot.
    GrpoKl,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Rapid => "rapid",
            Algorithm::OnPolicyGrpg => "grpg_onpolicy",
            Algorithm::GrpoKl => "grpo_kl",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Algorithm> {
        match s {
            "rapid" => Ok(Algorithm::Rapid),
            "grpg_onpolicy" => Ok(Algorithm::OnPolicyGrpg),
            "grpo_kl" => Ok(Algorithm::GrpoKl),
            other => Err(Error::config(format!(
                "unknown algorithm '{other}' (expected rapid, grpg_onpolicy, or grpo_kl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    /// Heavy-ball momentum with a fixed 0.9 decay.
    Momentum,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<OptimizerKind> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            other => Err(Error::config(format!(
                "unknown optimizer '{other}' (expected sgd or momentum)"
            ))),
        }
    }
}

const MOMENTUM_DECAY: f64 = 0.9;

/// Full specification of a training run, minus the task and the initial
/// policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Generations sampled per inference phase.
    pub n_inference: usize,
    /// Generations per prompt within a phase.
    pub n_group: usize,
    /// Generations consumed per gradient step.
    pub n_step: usize,
    /// Number of outer phases (T).
    pub outer_steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub clip: ClipConfig,
    /// Clip the ratio multiplying each sample's own gradient, not just
    /// the ratios inside the baseline.
    pub clip_leading_ratio: bool,
    /// Exclude each sample from its own baseline, removing
    /// self-inclusion bias.
    pub leave_one_out: bool,
    /// When false, skip importance weighting entirely and apply plain
    /// group-relative gradients to the stale batch.
    pub importance_weighting: bool,
    /// Draw mini-batch groups with replacement instead of iterating a
    /// once-shuffled partition of the phase batch.
    pub sample_minibatches: bool,
    /// KL penalty strength; consulted by the KL-regularized loop only.
    pub beta_kl: f64,
    pub seed: u64,
    /// Evaluate the exact objective after every this-many gradient steps
    /// (and always after the last); 0 disables oracle evaluation.
    pub oracle_cadence: usize,
    pub cost: CostModel,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            algorithm: Algorithm::Rapid,
            n_inference: 64,
            n_group: 4,
            n_step: 16,
            outer_steps: 25,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            clip: ClipConfig::default(),
            clip_leading_ratio: true,
            leave_one_out: false,
            importance_weighting: true,
            sample_minibatches: false,
            beta_kl: 0.04,
            seed: 0,
            oracle_cadence: 0,
            cost: CostModel::default(),
        }
    }
}

impl TrainConfig {
    /// Gradient steps per inference phase.
    pub fn h(&self) -> usize {
        self.n_inference / self.n_step
    }

    /// Total gradient steps over the whole run.
    pub fn total_steps(&self) -> usize {
        self.outer_steps * self.h()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("n_inference", self.n_inference),
            ("n_group", self.n_group),
            ("n_step", self.n_step),
            ("outer_steps", self.outer_steps),
        ] {
            if value == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.n_inference.is_multiple_of(self.n_group) {
            return Err(Error::config(format!(
                "n_group ({}) must divide n_inference ({})",
                self.n_group, self.n_inference
            )));
        }
        if !self.n_inference.is_multiple_of(self.n_step) {
            return Err(Error::config(format!(
                "n_step ({}) must divide n_inference ({})",
                self.n_step, self.n_inference
            )));
        }
        if !self.n_step.is_multiple_of(self.n_group) {
            return Err(Error::config(format!(
                "n_step ({}) must be a multiple of n_group ({}) so mini-batches hold whole groups",
                self.n_step, self.n_group
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if !self.beta_kl.is_finite() || self.beta_kl < 0.0 {
            return Err(Error::config(format!(
                "beta_kl must be finite and >= 0, got {}",
                self.beta_kl
            )));
        }
        if self.algorithm == Algorithm::OnPolicyGrpg && self.n_inference != self.n_step {
            return Err(Error::config(format!(
                "grpg_onpolicy requires n_inference ({}) == n_step ({})",
                self.n_inference, self.n_step
            )));
        }
        self.clip.validate()?;
        self.cost.validate()?;
        Ok(())
    }
}

/// Structural accounting for a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunCounters {
    /// Generations sampled over the whole run.
    pub total_generations: u64,
    /// Behavior snapshots taken (one per outer phase).
    pub snapshots: u64,
    pub gradient_steps: u64,
    pub sim_inference_seconds: f64,
    pub sim_backprop_seconds: f64,
}

/// Everything a finished run hands back.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub policy: Policy,
    pub metrics: Vec<MetricsRecord>,
    pub counters: RunCounters,
    /// Exact objective before any update, when oracle evaluation is on.
    pub initial_oracle_j: Option<f64>,
    /// Exact objective after the final update, when oracle evaluation is
    /// on.
    pub final_oracle_j: Option<f64>,
}

/// Snapshot of one completed gradient step, handed to run observers
/// before the record is archived. `policy` is the post-update state;
/// `minibatch` is the data the step consumed.
pub struct StepEvent<'a> {
    pub record: &'a MetricsRecord,
    pub policy: &'a Policy,
    pub minibatch: &'a [GroupBatch],
}

// Purpose tags keeping independent random streams from colliding.
const PURPOSE_EPOCH: u64 = 1;
const PURPOSE_SAMPLE: u64 = 2;
const PURPOSE_MINIBATCH: u64 = 3;
pub(crate) const PURPOSE_EVAL: u64 = 4;

/// Independent deterministic stream for (seed, purpose, a, b).
pub(crate) fn derive_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Epoch-style prompt iterator: a fresh shuffle of all prompt indices
/// whenever the previous shuffle is exhausted, so prompts repeat only
/// after every other prompt has been visited.
struct PromptCursor {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl PromptCursor {
    fn new() -> PromptCursor {
        PromptCursor { order: Vec::new(), pos: 0, epoch: 0 }
    }

    fn next(&mut self, num_prompts: usize, seed: u64) -> usize {
        if self.pos == self.order.len() {
            let mut rng = derive_rng(seed, PURPOSE_EPOCH, self.epoch, 0);
            self.order = (0..num_prompts).collect();
            self.order.shuffle(&mut rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let index = self.order[self.pos];
        self.pos += 1;
        index
    }
}

/// Samples one phase batch: `slots[i]` prompts each get `n_group`
/// generations from an independent per-slot stream. Slots are sampled in
/// parallel and collected in slot order, so the result does not depend
/// on thread scheduling.
fn sample_phase(
    policy: &Policy,
    task: &Task,
    slots: &[usize],
    outer_step: usize,
    config: &TrainConfig,
) -> Result<Vec<GroupBatch>> {
    let groups_per_phase = slots.len() as u64;
    slots
        .par_iter()
        .enumerate()
        .map(|(slot, &prompt_index)| {
            let prompt = &task.prompts()[prompt_index];
            let mut rng = derive_rng(
                config.seed,
                PURPOSE_SAMPLE,
                outer_step as u64,
                slot as u64,
            );
            let group_id = outer_step as u64 * groups_per_phase + slot as u64;
            let samples: Vec<Sample> = (0..config.n_group)
                .map(|_| {
                    let generation = policy.sample_generation(prompt, &mut rng);
                    let behavior_logprob = generation.logprob();
                    let reward = task.reward_for(prompt, &generation.tokens);
                    Sample {
                        prompt: prompt.clone(),
                        generation,
                        reward,
                        behavior_logprob,
                        group_id,
                    }
                })
                .collect();
            GroupBatch::new(samples)
        })
        .collect()
}

fn compute_gradient(
    minibatch: &[GroupBatch],
    policy: &Policy,
    reference: &Policy,
    config: &TrainConfig,
) -> Result<GradientVector> {
    match config.algorithm {
        Algorithm::OnPolicyGrpg => grpg_gradient(minibatch, policy),
        Algorithm::Rapid => {
            if config.importance_weighting {
                iw_grpg_gradient(
                    minibatch,
                    policy,
                    &config.clip,
                    config.leave_one_out,
                    config.clip_leading_ratio,
                )
            } else {
                grpg_gradient(minibatch, policy)
            }
        }
        Algorithm::GrpoKl => {
            kl_regularized_gradient(minibatch, policy, reference, config.beta_kl)
        }
    }
}

/// Ascent step in place; `velocity` persists across calls for momentum.
fn apply_update(
    policy: &mut Policy,
    velocity: &mut GradientVector,
    config: &TrainConfig,
    gradient: &GradientVector,
) {
    match config.optimizer {
        OptimizerKind::Sgd => {
            for (t, g) in policy.theta_mut().iter_mut().zip(gradient.as_slice()) {
                *t += config.learning_rate * g;
            }
        }
        OptimizerKind::Momentum => {
            velocity.scale(MOMENTUM_DECAY);
            velocity.add_scaled(gradient, 1.0);
            for (t, v) in policy.theta_mut().iter_mut().zip(velocity.as_slice()) {
                *t += config.learning_rate * v;
            }
        }
    }
}

/// Replay bundle written when a gradient turns non-finite.
fn dump_minibatch(
    outer: usize,
    inner: usize,
    global_step: u64,
    minibatch: &[GroupBatch],
    policy: &Policy,
) -> String {
    let batch: Vec<serde_json::Value> = minibatch
        .iter()
        .flat_map(|g| g.samples())
        .map(|s| {
            serde_json::json!({
                "prompt_id": s.prompt.id,
                "tokens": s.generation.tokens,
                "reward": s.reward,
                "behavior_logprob": s.behavior_logprob,
                "group_id": s.group_id,
            })
        })
        .collect();
    serde_json::json!({
        "outer_step": outer,
        "inner_step": inner,
        "global_step": global_step,
        "theta": policy.theta(),
        "minibatch": batch,
    })
    .to_string()
}

/// Runs the configured algorithm end to end. See [`run_with_observer`]
/// for the hook-carrying variant.
pub fn run(config: &TrainConfig, task: &Task, initial: &Policy) -> Result<RunOutput> {
    run_with_observer(config, task, initial, |_| Ok(()))
}

/// Convenience wrappers pinning the algorithm choice.
pub fn run_rapid(config: &TrainConfig, task: &Task, initial: &Policy) -> Result<RunOutput> {
    run(&TrainConfig { algorithm: Algorithm::Rapid, ..config.clone() }, task, initial)
}

pub fn run_onpolicy_grpg(
    config: &TrainConfig,
    task: &Task,
    initial: &Policy,
) -> Result<RunOutput> {
    run(&TrainConfig { algorithm: Algorithm::OnPolicyGrpg, ..config.clone() }, task, initial)
}

pub fn run_grpo_kl(config: &TrainConfig, task: &Task, initial: &Policy) -> Result<RunOutput> {
    run(&TrainConfig { algorithm: Algorithm::GrpoKl, ..config.clone() }, task, initial)
}

/// Full training loop with a per-step observer for checkpointing and
/// trace export. The observer sees every gradient step in order, after
/// the update has been applied.
pub fn run_with_observer<F>(
    config: &TrainConfig,
    task: &Task,
    initial: &Policy,
    mut observer: F,
) -> Result<RunOutput>
where
    F: FnMut(&StepEvent<'_>) -> Result<()>,
{
    config.validate()?;
    if initial.vocab() != task.vocab() {
        return Err(Error::config(format!(
            "policy vocabulary {:?} does not match task vocabulary {:?}",
            initial.vocab(),
            task.vocab()
        )));
    }
    if initial.map().classes() < task.num_classes() {
        return Err(Error::config(format!(
            "feature map covers {} prompt classes but the task uses {}",
            initial.map().classes(),
            task.num_classes()
        )));
    }

    let h = config.h();
    let groups_per_phase = config.n_inference / config.n_group;
    let groups_per_minibatch = config.n_step / config.n_group;
    let total_steps = config.total_steps() as u64;
    let oracle_on = config.oracle_cadence > 0;
    let record_beta = if config.algorithm == Algorithm::GrpoKl { config.beta_kl } else { 0.0 };

    let mut policy = initial.clone();
    let mut velocity = GradientVector::zeros(policy.dimension());
    let mut cursor = PromptCursor::new();
    let mut metrics = Vec::with_capacity(config.outer_steps * h);
    let mut counters = RunCounters::default();
    let mut sim_cost = 0.0;
    let mut global_step: u64 = 0;

    let initial_oracle_j = if oracle_on {
        Some(exact_objective(&policy, task, DEFAULT_ENUMERATION_CAP)?)
    } else {
        None
    };

    for t in 0..config.outer_steps {
        let slots: Vec<usize> =
            (0..groups_per_phase).map(|_| cursor.next(task.prompts().len(), config.seed)).collect();
        let groups = sample_phase(&policy, task, &slots, t, config)?;
        counters.total_generations += config.n_inference as u64;
        counters.snapshots += 1;
        let inference_cost = config.cost.inference_seconds(1, config.n_inference as u64);
        counters.sim_inference_seconds += inference_cost;
        sim_cost += inference_cost;

        // Behavior snapshot; sampling above already recorded its
        // log-probabilities, the copy serves the KL reference.
        let reference = policy.clone();

        let mut minibatch_rng = derive_rng(config.seed, PURPOSE_MINIBATCH, t as u64, 0);
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut minibatch_rng);

        for inner in 0..h {
            let chosen: Vec<usize> = if config.sample_minibatches {
                (0..groups_per_minibatch)
                    .map(|_| minibatch_rng.gen_range(0..groups.len()))
                    .collect()
            } else {
                order[inner * groups_per_minibatch..(inner + 1) * groups_per_minibatch].to_vec()
            };
            let minibatch: Vec<GroupBatch> =
                chosen.iter().map(|&i| groups[i].clone()).collect();

            // Drift diagnostics against the snapshot, before the update.
            let flat = || minibatch.iter().flat_map(|g| g.samples());
            let stale = staleness(flat(), &policy, &config.clip)?;
            let stale_signed = staleness_signed(flat(), &policy, &config.clip)?;
            let clipped = clip_fraction(flat(), &policy, &config.clip)?;
            let mean_reward =
                flat().map(|s| s.reward).sum::<f64>() / config.n_step as f64;
            let mean_completion_len =
                flat().map(|s| s.generation.tokens.len() as f64).sum::<f64>()
                    / config.n_step as f64;

            let gradient = compute_gradient(&minibatch, &policy, &reference, config)?;
            if !gradient.is_finite() {
                return Err(Error::NonFiniteGradient {
                    outer: t,
                    inner,
                    dump: dump_minibatch(t, inner, global_step, &minibatch, &policy),
                });
            }
            apply_update(&mut policy, &mut velocity, config, &gradient);
            global_step += 1;
            counters.gradient_steps += 1;
            let backprop_cost = config.cost.backprop_seconds(1, config.n_step as u64);
            counters.sim_backprop_seconds += backprop_cost;
            sim_cost += backprop_cost;

            let sample_oracle = oracle_on
                && (global_step.is_multiple_of(config.oracle_cadence as u64)
                    || global_step == total_steps);
            let oracle_j = if sample_oracle {
                Some(exact_objective(&policy, task, DEFAULT_ENUMERATION_CAP)?)
            } else {
                None
            };

            let record = MetricsRecord {
                outer_step: t as u64,
                inner_step: inner as u64,
                global_step,
                mean_reward,
                staleness: stale,
                staleness_signed: stale_signed,
                clip_fraction: clipped,
                mean_completion_len,
                beta_kl: record_beta,
                sim_cost,
                oracle_j,
            };
            observer(&StepEvent { record: &record, policy: &policy, minibatch: &minibatch })?;
            metrics.push(record);
        }
    }

    let final_oracle_j = metrics.last().and_then(|r| r.oracle_j);
    Ok(RunOutput { policy, metrics, counters, initial_oracle_j, final_oracle_j })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RAPIDCK1";

/// Policy weights plus enough header to rebuild and cross-check them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub feature_dim: u32,
    pub vocab_size: u32,
    pub task_name: String,
    pub step: u64,
    pub theta: Vec<f64>,
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy, task_name: &str, step: u64) -> Checkpoint {
        Checkpoint {
            feature_dim: policy.dimension() as u32,
            vocab_size: policy.vocab().size() as u32,
            task_name: task_name.to_string(),
            step,
            theta: policy.theta().to_vec(),
        }
    }
}

/// Writes the binary checkpoint plus a plain-text sidecar next to it
/// (same stem, `.txt`). Layout, all little-endian: 8-byte magic
/// `RAPIDCK1`, u32 feature dim, u32 vocab size, u64 step, u32 name
/// length, name bytes, then feature-dim f64 weights.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if checkpoint.theta.len() != checkpoint.feature_dim as usize {
        return Err(Error::Checkpoint(format!(
            "weight count {} does not match feature_dim {}",
            checkpoint.theta.len(),
            checkpoint.feature_dim
        )));
    }
    let mut bytes = Vec::with_capacity(32 + checkpoint.task_name.len() + checkpoint.theta.len() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&checkpoint.feature_dim.to_le_bytes());
    bytes.extend_from_slice(&checkpoint.vocab_size.to_le_bytes());
    bytes.extend_from_slice(&checkpoint.step.to_le_bytes());
    bytes.extend_from_slice(&(checkpoint.task_name.len() as u32).to_le_bytes());
    bytes.extend_from_slice(checkpoint.task_name.as_bytes());
    for w in &checkpoint.theta {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;

    let mut sidecar = String::new();
    sidecar.push_str(&format!("task = {}\n", checkpoint.task_name));
    sidecar.push_str(&format!("step = {}\n", checkpoint.step));
    sidecar.push_str(&format!("feature_dim = {}\n", checkpoint.feature_dim));
    sidecar.push_str(&format!("vocab_size = {}\n", checkpoint.vocab_size));
    for (i, w) in checkpoint.theta.iter().enumerate() {
        sidecar.push_str(&format!("theta[{i}] = {w}\n"));
    }
    std::fs::write(path.with_extension("txt"), sidecar)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 28 {
        return Err(fail("file too short for the header"));
    }
    if &bytes[0..8] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic (not a checkpoint file)"));
    }
    let feature_dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let vocab_size = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let step = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let name_len = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as usize;
    let name_end = 28 + name_len;
    let body_end = name_end + feature_dim as usize * 8;
    if bytes.len() != body_end {
        return Err(fail(&format!(
            "expected {body_end} bytes for the declared sizes, found {}",
            bytes.len()
        )));
    }
    let task_name = String::from_utf8(bytes[28..name_end].to_vec())
        .map_err(|_| fail("task name is not valid UTF-8"))?;
    let theta: Vec<f64> = bytes[name_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Checkpoint { feature_dim, vocab_size, task_name, step, theta })
}
