//! Config files and overrides.
//!
//! Runs are described by a flat `key = value` file with `[task]`,
//! `[policy]`, `[train]`, `[cost]`, and `[output]` sections. `--set
//! section.key=value` arguments layer on top (later assignments win), a
//! bare key is accepted when only one section defines it, and the
//! shorthand `--set H=n` rewrites `n_inference` to `n * n_step` after
//! every other assignment has landed. Every error names its origin:
//! `file:line` or the offending `--set` argument.

use crate::error::{Error, Result};
use crate::estimator::{ClipConfig, ClipMode};
use crate::policy::{FeatureMap, Policy};
use crate::task::{builtin_task, Task, TaskParams};
use crate::trainer::{OptimizerKind, TrainConfig};
use std::path::{Path, PathBuf};

/// Environment variable naming the root under which relative output
/// directories are created.
pub const OUT_ROOT_ENV: &str = "RAPID_OUT_ROOT";

const KNOWN_SECTIONS: [&str; 5] = ["task", "policy", "train", "cost", "output"];

/// Every addressable key, for resolving bare `--set key=value`
/// arguments. The resolver's match statement is the authority on
/// semantics; this table only routes unqualified names.
const KNOWN_KEYS: &[(&str, &str)] = &[
    ("task", "name"),
    ("task", "vocab_size"),
    ("task", "num_prompts"),
    ("task", "max_len"),
    ("task", "bits"),
    ("task", "seed"),
    ("policy", "features"),
    ("policy", "position_buckets"),
    ("train", "algorithm"),
    ("train", "n_inference"),
    ("train", "n_group"),
    ("train", "n_step"),
    ("train", "outer_steps"),
    ("train", "learning_rate"),
    ("train", "optimizer"),
    ("train", "clip_mode"),
    ("train", "eta"),
    ("train", "clip_leading_ratio"),
    ("train", "leave_one_out"),
    ("train", "importance_weighting"),
    ("train", "sample_minibatches"),
    ("train", "beta_kl"),
    ("train", "seed"),
    ("train", "oracle_cadence"),
    ("cost", "a_inf"),
    ("cost", "b_inf"),
    ("cost", "a_bp"),
    ("cost", "b_bp"),
    ("output", "dir"),
    ("output", "metric_cadence"),
    ("output", "checkpoint_cadence"),
    ("output", "token_trace_cadence"),
];

/// One `key = value` assignment with its origin for error messages.
#[derive(Debug, Clone)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Which feature map the policy uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    PromptUnigram,
    TabularBigram,
}

impl FeatureKind {
    fn as_str(&self) -> &'static str {
        match self {
            FeatureKind::PromptUnigram => "prompt_unigram",
            FeatureKind::TabularBigram => "tabular_bigram",
        }
    }
}

/// Where a run writes and how often it snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Keep every this-many-th metrics row (the final row always stays).
    pub metric_cadence: usize,
    /// Write a checkpoint every this-many gradient steps; 0 disables.
    pub checkpoint_cadence: usize,
    /// Export a token-level weight trace every this-many gradient
    /// steps; 0 disables.
    pub token_trace_cadence: usize,
}

/// A fully-resolved run description: defaults, then file assignments,
/// then overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub task_name: String,
    pub task_params: TaskParams,
    pub feature_kind: FeatureKind,
    pub position_buckets: usize,
    pub train: TrainConfig,
    pub output: OutputSpec,
}

impl RunSpec {
    pub fn build_task(&self) -> Result<Task> {
        builtin_task(&self.task_name, &self.task_params)
    }

    /// Zero-initialized policy matching the task's shape.
    pub fn build_policy(&self, task: &Task) -> Policy {
        let classes = task.num_classes();
        let vocab = task.vocab();
        let map = match self.feature_kind {
            FeatureKind::PromptUnigram => FeatureMap::prompt_unigram(classes, vocab.size()),
            FeatureKind::TabularBigram => {
                FeatureMap::tabular_bigram(classes, vocab.size(), self.position_buckets)
            }
        };
        Policy::zeros(map, vocab, task.max_len())
    }

    /// Rebuilds a policy around checkpointed weights, cross-checking the
    /// dimensions recorded in the checkpoint header.
    pub fn policy_from_theta(&self, task: &Task, theta: Vec<f64>) -> Result<Policy> {
        let zero = self.build_policy(task);
        if theta.len() != zero.dimension() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} weights but the configured policy needs {}",
                theta.len(),
                zero.dimension()
            )));
        }
        Ok(Policy::new(*zero.map(), zero.vocab(), zero.max_len(), theta))
    }
}

/// Parses one config file into assignment entries.
pub fn parse_file(path: &Path, entries: &mut Vec<Entry>) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_str(&text, &path.display().to_string(), entries)
}

/// Parses config text; `source` names it in error messages.
pub fn parse_str(text: &str, source: &str, entries: &mut Vec<Entry>) -> Result<()> {
    let mut section: Option<String> = None;
    for (index, line) in text.lines().enumerate() {
        let origin = format!("{source}:{}", index + 1);
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return Err(Error::config(format!("{origin}: unterminated section header")));
            };
            let name = name.trim().to_ascii_lowercase();
            if !KNOWN_SECTIONS.contains(&name.as_str()) {
                return Err(Error::config(format!(
                    "{origin}: unknown section [{name}] (expected one of task, policy, train, cost, output)"
                )));
            }
            section = Some(name);
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::config(format!(
                "{origin}: expected 'key = value' or a [section] header"
            )));
        };
        let Some(section) = section.clone() else {
            return Err(Error::config(format!(
                "{origin}: assignment before any [section] header"
            )));
        };
        entries.push(Entry {
            section,
            key: key.trim().to_ascii_lowercase(),
            value: value.trim().to_string(),
            origin,
        });
    }
    Ok(())
}

/// Parses one `--set` argument. Accepted shapes: `section.key=value`,
/// `key=value` when the key is unique across sections, and `H=n`.
pub fn apply_set(arg: &str, entries: &mut Vec<Entry>) -> Result<()> {
    let origin = format!("--set {arg}");
    let Some((key_part, value)) = arg.split_once('=') else {
        return Err(Error::config(format!("{origin}: expected KEY=VALUE")));
    };
    let key_part = key_part.trim();
    let value = value.trim().to_string();
    if key_part.eq_ignore_ascii_case("h") {
        entries.push(Entry { section: "train".into(), key: "h_ratio".into(), value, origin });
        return Ok(());
    }
    let (section, key) = if let Some((section, key)) = key_part.split_once('.') {
        let section = section.trim().to_ascii_lowercase();
        if !KNOWN_SECTIONS.contains(&section.as_str()) {
            return Err(Error::config(format!(
                "{origin}: unknown section '{section}' (expected one of task, policy, train, cost, output)"
            )));
        }
        (section, key.trim().to_ascii_lowercase())
    } else {
        let key = key_part.to_ascii_lowercase();
        let candidates: Vec<&(&str, &str)> =
            KNOWN_KEYS.iter().filter(|(_, k)| *k == key).collect();
        match candidates.len() {
            0 => {
                return Err(Error::config(format!("{origin}: unknown key '{key}'")));
            }
            1 => (candidates[0].0.to_string(), key),
            _ => {
                let options: Vec<String> =
                    candidates.iter().map(|(s, k)| format!("{s}.{k}")).collect();
                return Err(Error::config(format!(
                    "{origin}: '{key}' is ambiguous, qualify it as one of: {}",
                    options.join(", ")
                )));
            }
        }
    };
    entries.push(Entry { section, key, value, origin });
    Ok(())
}

fn parse_usize(origin: &str, what: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|e| {
        Error::config(format!("{origin}: {what}: invalid count '{value}' ({e})"))
    })
}

fn parse_u64(origin: &str, what: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|e| {
        Error::config(format!("{origin}: {what}: invalid integer '{value}' ({e})"))
    })
}

fn parse_f64(origin: &str, what: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|e| {
        Error::config(format!("{origin}: {what}: invalid number '{value}' ({e})"))
    })
}

fn parse_bool(origin: &str, what: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(format!(
            "{origin}: {what}: expected true or false, got '{other}'"
        ))),
    }
}

fn normalize_name(value: &str) -> String {
    value.trim().to_ascii_lowercase().replace(['-', ' '], "_")
}

/// Folds entries over the defaults and validates the result.
///
/// `cli_seed` and `cli_out` are the `--seed` and `--out` flags; they win
/// over everything. Relative output directories are resolved under
/// `RAPID_OUT_ROOT` when that variable is set.
pub fn resolve(entries: &[Entry], cli_seed: Option<u64>, cli_out: Option<&Path>) -> Result<RunSpec> {
    let mut task_name = "last_token_match".to_string();
    let mut task_params = TaskParams::default();
    let mut feature_kind = FeatureKind::PromptUnigram;
    let mut position_buckets = 2usize;
    let mut train = TrainConfig::default();
    let mut clip_mode = train.clip.mode;
    let mut eta = train.clip.eta;
    let mut out_dir: Option<PathBuf> = None;
    let mut metric_cadence = 1usize;
    let mut checkpoint_cadence = 0usize;
    let mut token_trace_cadence = 0usize;
    let mut h_ratio: Option<(usize, String)> = None;

    for entry in entries {
        let origin = entry.origin.as_str();
        let key = format!("{}.{}", entry.section, entry.key);
        let what = key.as_str();
        let value = entry.value.as_str();
        match (entry.section.as_str(), entry.key.as_str()) {
            ("task", "name") => task_name = normalize_name(value),
            ("task", "vocab_size") => task_params.vocab_size = parse_usize(origin, what, value)?,
            ("task", "num_prompts") => task_params.num_prompts = parse_usize(origin, what, value)?,
            ("task", "max_len") => task_params.max_len = parse_usize(origin, what, value)?,
            ("task", "bits") => task_params.bits = parse_usize(origin, what, value)?,
            ("task", "seed") => task_params.seed = parse_u64(origin, what, value)?,
            ("policy", "features") => {
                feature_kind = match normalize_name(value).as_str() {
                    "prompt_unigram" => FeatureKind::PromptUnigram,
                    "tabular_bigram" => FeatureKind::TabularBigram,
                    other => {
                        return Err(Error::config(format!(
                            "{origin}: {what}: unknown feature map '{other}' (expected prompt_unigram or tabular_bigram)"
                        )));
                    }
                }
            }
            ("policy", "position_buckets") => {
                position_buckets = parse_usize(origin, what, value)?;
                if position_buckets == 0 {
                    return Err(Error::config(format!(
                        "{origin}: {what}: must be at least 1"
                    )));
                }
            }
            ("train", "algorithm") => {
                train.algorithm = value
                    .parse()
                    .map_err(|e| Error::config(format!("{origin}: {what}: {e}")))?;
            }
            ("train", "n_inference") => train.n_inference = parse_usize(origin, what, value)?,
            ("train", "n_group") => train.n_group = parse_usize(origin, what, value)?,
            ("train", "n_step") => train.n_step = parse_usize(origin, what, value)?,
            ("train", "outer_steps") => train.outer_steps = parse_usize(origin, what, value)?,
            ("train", "learning_rate") => train.learning_rate = parse_f64(origin, what, value)?,
            ("train", "optimizer") => {
                train.optimizer = value
                    .parse()
                    .map_err(|e| Error::config(format!("{origin}: {what}: {e}")))?;
            }
            ("train", "clip_mode") => {
                clip_mode = match value {
                    "cap" => ClipMode::Cap,
                    "floor" => ClipMode::Floor,
                    "symmetric" => ClipMode::Symmetric,
                    "off" => ClipMode::Off,
                    other => {
                        return Err(Error::config(format!(
                            "{origin}: {what}: unknown clip mode '{other}' (expected cap, floor, symmetric, or off)"
                        )));
                    }
                }
            }
            ("train", "eta") => eta = parse_f64(origin, what, value)?,
            ("train", "clip_leading_ratio") => {
                train.clip_leading_ratio = parse_bool(origin, what, value)?;
            }
            ("train", "leave_one_out") => train.leave_one_out = parse_bool(origin, what, value)?,
            ("train", "importance_weighting") => {
                train.importance_weighting = parse_bool(origin, what, value)?;
            }
            ("train", "sample_minibatches") => {
                train.sample_minibatches = parse_bool(origin, what, value)?;
            }
            ("train", "beta_kl") => train.beta_kl = parse_f64(origin, what, value)?,
            ("train", "seed") => train.seed = parse_u64(origin, what, value)?,
            ("train", "oracle_cadence") => train.oracle_cadence = parse_usize(origin, what, value)?,
            ("train", "h_ratio") => {
                let h = parse_usize(origin, what, value)?;
                if h == 0 {
                    return Err(Error::config(format!("{origin}: H must be at least 1")));
                }
                h_ratio = Some((h, origin.to_string()));
            }
            ("cost", "a_inf") => train.cost.a_inf = parse_f64(origin, what, value)?,
            ("cost", "b_inf") => train.cost.b_inf = parse_f64(origin, what, value)?,
            ("cost", "a_bp") => train.cost.a_bp = parse_f64(origin, what, value)?,
            ("cost", "b_bp") => train.cost.b_bp = parse_f64(origin, what, value)?,
            ("output", "dir") => out_dir = Some(PathBuf::from(value)),
            ("output", "metric_cadence") => metric_cadence = parse_usize(origin, what, value)?,
            ("output", "checkpoint_cadence") => {
                checkpoint_cadence = parse_usize(origin, what, value)?;
            }
            ("output", "token_trace_cadence") => {
                token_trace_cadence = parse_usize(origin, what, value)?;
            }
            _ => {
                return Err(Error::config(format!(
                    "{origin}: unknown key '{what}'"
                )));
            }
        }
    }

    if let Some(seed) = cli_seed {
        train.seed = seed;
    }
    if let Some((h, origin)) = h_ratio {
        train.n_inference = h.checked_mul(train.n_step).ok_or_else(|| {
            Error::config(format!("{origin}: H * n_step overflows"))
        })?;
    }
    train.clip = ClipConfig { eta, mode: clip_mode };
    train.validate()?;
    if metric_cadence == 0 {
        return Err(Error::config("output.metric_cadence must be at least 1".to_string()));
    }

    let dir = cli_out.map(Path::to_path_buf).or(out_dir).unwrap_or_else(|| {
        PathBuf::from(format!(
            "runs/{task_name}_{}_seed{}",
            train.algorithm.as_str(),
            train.seed
        ))
    });
    let dir = match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    };

    Ok(RunSpec {
        task_name,
        task_params,
        feature_kind,
        position_buckets,
        train,
        output: OutputSpec { dir, metric_cadence, checkpoint_cadence, token_trace_cadence },
    })
}

/// Convenience: file (optional) plus `--set` arguments plus flag
/// overrides, in that precedence order.
pub fn load(
    config: Option<&Path>,
    sets: &[String],
    cli_seed: Option<u64>,
    cli_out: Option<&Path>,
) -> Result<RunSpec> {
    let mut entries = Vec::new();
    if let Some(path) = config {
        parse_file(path, &mut entries)?;
    }
    for set in sets {
        apply_set(set, &mut entries)?;
    }
    resolve(&entries, cli_seed, cli_out)
}

/// Renders a spec back into config-file text. The output parses back to
/// an identical spec, and serves as the provenance record for a run.
pub fn render_resolved(spec: &RunSpec) -> String {
    let optimizer = match spec.train.optimizer {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Momentum => "momentum",
    };
    let clip_mode = match spec.train.clip.mode {
        ClipMode::Cap => "cap",
        ClipMode::Floor => "floor",
        ClipMode::Symmetric => "symmetric",
        ClipMode::Off => "off",
    };
    format!(
        "[task]\n\
         name = {}\n\
         vocab_size = {}\n\
         num_prompts = {}\n\
         max_len = {}\n\
         bits = {}\n\
         seed = {}\n\
         \n\
         [policy]\n\
         features = {}\n\
         position_buckets = {}\n\
         \n\
         [train]\n\
         algorithm = {}\n\
         n_inference = {}\n\
         n_group = {}\n\
         n_step = {}\n\
         outer_steps = {}\n\
         learning_rate = {}\n\
         optimizer = {}\n\
         clip_mode = {}\n\
         eta = {}\n\
         clip_leading_ratio = {}\n\
         leave_one_out = {}\n\
         importance_weighting = {}\n\
         sample_minibatches = {}\n\
         beta_kl = {}\n\
         seed = {}\n\
         oracle_cadence = {}\n\
         \n\
         [cost]\n\
         a_inf = {}\n\
         b_inf = {}\n\
         a_bp = {}\n\
         b_bp = {}\n\
         \n\
         [output]\n\
         dir = {}\n\
         metric_cadence = {}\n\
         checkpoint_cadence = {}\n\
         token_trace_cadence = {}\n",
        spec.task_name,
        spec.task_params.vocab_size,
        spec.task_params.num_prompts,
        spec.task_params.max_len,
        spec.task_params.bits,
        spec.task_params.seed,
        spec.feature_kind.as_str(),
        spec.position_buckets,
        spec.train.algorithm.as_str(),
        spec.train.n_inference,
        spec.train.n_group,
        spec.train.n_step,
        spec.train.outer_steps,
        spec.train.learning_rate,
        optimizer,
        clip_mode,
        eta_text(&spec.train.clip),
        spec.train.clip_leading_ratio,
        spec.train.leave_one_out,
        spec.train.importance_weighting,
        spec.train.sample_minibatches,
        spec.train.beta_kl,
        spec.train.seed,
        spec.train.oracle_cadence,
        spec.train.cost.a_inf,
        spec.train.cost.b_inf,
        spec.train.cost.a_bp,
        spec.train.cost.b_bp,
        spec.output.dir.display(),
        spec.output.metric_cadence,
        spec.output.checkpoint_cadence,
        spec.output.token_trace_cadence,
    )
}

fn eta_text(clip: &ClipConfig) -> String {
    if clip.eta.is_infinite() {
        "inf".to_string()
    } else {
        format!("{}", clip.eta)
    }
}

/// Loads the spec a run directory was produced with.
pub fn spec_from_run_dir(dir: &Path) -> Result<RunSpec> {
    let path = dir.join("resolved.cfg");
    if !path.is_file() {
        return Err(Error::config(format!(
            "{} is not a run directory (missing resolved.cfg)",
            dir.display()
        )));
    }
    let mut entries = Vec::new();
    parse_file(&path, &mut entries)?;
    resolve(&entries, None, None)
}
