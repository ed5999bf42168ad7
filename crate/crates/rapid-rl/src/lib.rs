#![forbid(unsafe_code)]

//! Off-policy policy-gradient training at desk scale.
//!
//! The trainer alternates two phases: a large *inference* phase that
//! samples many generations per prompt from the current policy, and a
//! sequence of small *update* phases that take importance-weighted
//! group-relative policy-gradient steps on mini-batches of that data.
//! Amortizing one large sampling batch over several gradient steps is what
//! makes the schedule cheap; the importance weights (clipped for
//! stability) are what keep the updates honest while the data goes stale.
//!
//! Everything runs on exactly solvable pieces so the statistics can be
//! checked, not eyeballed:
//!
//! - [`policy`]: log-linear autoregressive policies with exact sampling,
//!   scoring, closed-form score-function gradients, and full output-space
//!   enumeration.
//! - [`task`]: small synthetic prompt sets with deterministic rewards.
//! - [`estimator`]: advantage and gradient estimators, importance
//!   weighting, and weight clipping.
//! - [`oracle`]: exact objectives, exact gradients, and exact estimator
//!   expectations by joint enumeration - the measuring stick the
//!   estimators are held against.
//! - [`trainer`]: the alternating-phase training loop, optimizers, and
//!   checkpoints.
//! - [`metrics`]: staleness, clip fraction, token-level weight traces,
//!   pass@k, correlation, and a simulated cost model.
//! - [`cli`]: config files, run orchestration, sweeps, verification, and
//!   reports (the `rapid` binary is a thin wrapper over this module).

pub mod cli;
pub mod error;
pub mod estimator;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
pub use estimator::{
    clip_weight, group_advantages, grpg_gradient, importance_weight, iw_group_advantages,
    iw_grpg_gradient, kl_regularized_gradient, single_path_advantages, ClipConfig, ClipMode,
    GroupBatch, Sample,
};
pub use metrics::{
    clip_fraction, pass_at_k, pearson, read_metrics_csv, simulated_phase_cost, staleness,
    staleness_signed, token_weight_trace, write_metrics_csv, write_token_trace_csv, CostModel,
    MetricsRecord, METRICS_CSV_COLUMNS,
};
pub use oracle::{
    estimator_expectation, estimator_mc, exact_gradient, exact_objective, exact_value,
    oracle_report, EstimatorKind, EstimatorSpec, McEstimate, OracleReport, DEFAULT_JOINT_CAP,
};
pub use policy::{
    FeatureMap, Generation, GradientVector, Policy, Vocab, DEFAULT_ENUMERATION_CAP,
};
pub use task::{builtin_task, Prompt, Task, TaskParams};
pub use trainer::{
    load_checkpoint, run, run_grpo_kl, run_onpolicy_grpg, run_rapid, run_with_observer,
    save_checkpoint, Algorithm, Checkpoint, OptimizerKind, RunCounters, RunOutput, StepEvent,
    TrainConfig,
};
