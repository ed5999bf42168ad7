//! Run diagnostics and their file formats.
//!
//! Staleness, clip fraction, and token-level weight traces quantify how
//! far the scoring policy has drifted from the behavior policy that
//! produced a batch. Pass@k and Pearson correlation summarize runs and
//! sweeps. The analytic cost model stands in for wall-clock measurement
//! so batch-schedule comparisons stay deterministic.

use crate::error::{Error, Result};
use crate::estimator::{clip_weight, importance_weight, ClipConfig, Sample};
use crate::policy::Policy;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Mean absolute log of the clipped importance weight across samples.
///
/// Zero exactly when every clipped weight is 1 (in particular for any
/// on-policy batch) and growing as updates accumulate against a frozen
/// behavior snapshot.
pub fn staleness<'a, I>(samples: I, policy: &Policy, cfg: &ClipConfig) -> Result<f64>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in samples {
        let (clipped, _) = clip_weight(importance_weight(policy, sample)?, cfg);
        total += clipped.ln().abs();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(total / count as f64)
}

/// Signed companion of [`staleness`]: mean log clipped weight without the
/// absolute value. Emitted alongside the absolute variant so the two
/// aggregation conventions can be compared on any run.
pub fn staleness_signed<'a, I>(samples: I, policy: &Policy, cfg: &ClipConfig) -> Result<f64>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in samples {
        let (clipped, _) = clip_weight(importance_weight(policy, sample)?, cfg);
        total += clipped.ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(total / count as f64)
}

/// Fraction of generation-level importance weights the clip rule altered.
pub fn clip_fraction<'a, I>(samples: I, policy: &Policy, cfg: &ClipConfig) -> Result<f64>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut clipped_count = 0usize;
    let mut count = 0usize;
    for sample in samples {
        let (_, clipped) = clip_weight(importance_weight(policy, sample)?, cfg);
        if clipped {
            clipped_count += 1;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(clipped_count as f64 / count as f64)
}

/// Per-token log importance ratio for one generation: current policy
/// log-probability minus the behavior log-probability recorded at
/// sampling time, position by position. Sums to the sequence log-weight.
pub fn token_weight_trace(sample: &Sample, policy: &Policy) -> Result<Vec<f64>> {
    let current = policy.token_logprobs(&sample.prompt, &sample.generation.tokens)?;
    Ok(current
        .iter()
        .zip(&sample.generation.logprobs)
        .map(|(cur, behavior)| cur - behavior)
        .collect())
}

/// Unbiased pass@k over per-prompt correctness flags.
///
/// Each prompt contributes `1 - C(g-c, k)/C(g, k)` where `g` is its
/// number of generations and `c` its number of correct ones: the
/// probability that a uniform subset of k generations contains at least
/// one correct answer. Prompts are averaged uniformly.
pub fn pass_at_k(flags: &[Vec<bool>], k: usize) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if k == 0 {
        return Err(Error::config("pass@k requires k >= 1"));
    }
    let mut total = 0.0;
    for prompt_flags in flags {
        let g = prompt_flags.len();
        if g < k {
            return Err(Error::PassAtKArity { g, k });
        }
        let c = prompt_flags.iter().filter(|&&b| b).count();
        total += 1.0 - miss_probability(g, c, k);
    }
    Ok(total / flags.len() as f64)
}

/// Probability that k draws without replacement from g generations, c of
/// them correct, contain no correct one.
fn miss_probability(g: usize, c: usize, k: usize) -> f64 {
    if g - c < k {
        return 0.0;
    }
    let mut p = 1.0;
    for i in 0..k {
        p *= (g - c - i) as f64 / (g - i) as f64;
    }
    p
}

/// Sample Pearson correlation coefficient, clamped into [-1, 1] against
/// floating-point drift. Errors on mismatched or short series and on
/// constant series, where the coefficient is undefined.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need two equal-length series with at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mean_x) * (y - mean_y);
        sxx += (x - mean_x) * (x - mean_x);
        syy += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation("first series is constant".into()));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation("second series is constant".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Affine cost model for simulated runtime accounting.
///
/// A batch of work costs a fixed amount plus a marginal amount per
/// sample; inference and backprop have independent coefficients. The
/// defaults are illustrative magnitudes for comparing schedules, not
/// measurements, and every coefficient is configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Fixed seconds per inference batch.
    pub a_inf: f64,
    /// Marginal seconds per generated sample.
    pub b_inf: f64,
    /// Fixed seconds per backprop step.
    pub a_bp: f64,
    /// Marginal seconds per sample in a backprop step.
    pub b_bp: f64,
}

impl Default for CostModel {
    fn default() -> CostModel {
        CostModel { a_inf: 10.0, b_inf: 0.05, a_bp: 2.0, b_bp: 0.2 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("a_inf", self.a_inf),
            ("b_inf", self.b_inf),
            ("a_bp", self.a_bp),
            ("b_bp", self.b_bp),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::config(format!(
                    "cost coefficient {name} must be finite and >= 0, got {value}"
                )));
            }
        }
        Ok(())
    }

    /// Seconds to generate `samples` spread over `batches` batches.
    pub fn inference_seconds(&self, batches: u64, samples: u64) -> f64 {
        batches as f64 * self.a_inf + samples as f64 * self.b_inf
    }

    /// Seconds for `steps` gradient steps over `samples` total samples.
    pub fn backprop_seconds(&self, steps: u64, samples: u64) -> f64 {
        steps as f64 * self.a_bp + samples as f64 * self.b_bp
    }
}

/// Total simulated seconds for one phase: inference plus backprop.
pub fn simulated_phase_cost(
    model: &CostModel,
    inference_batches: u64,
    inference_samples: u64,
    backprop_steps: u64,
    backprop_samples: u64,
) -> f64 {
    model.inference_seconds(inference_batches, inference_samples)
        + model.backprop_seconds(backprop_steps, backprop_samples)
}

/// Column order of the metrics CSV; kept stable for downstream tooling.
pub const METRICS_CSV_COLUMNS: [&str; 11] = [
    "outer_step",
    "inner_step",
    "global_step",
    "mean_reward",
    "staleness",
    "staleness_signed",
    "clip_fraction",
    "mean_completion_len",
    "beta_kl",
    "sim_cost",
    "oracle_j",
];

/// One row of run diagnostics, recorded per gradient step.
///
/// `sim_cost` is cumulative simulated seconds up to and including this
/// step; `oracle_j` is the exact objective after the step when the run's
/// oracle cadence sampled it, empty otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub outer_step: u64,
    pub inner_step: u64,
    pub global_step: u64,
    pub mean_reward: f64,
    pub staleness: f64,
    pub staleness_signed: f64,
    pub clip_fraction: f64,
    pub mean_completion_len: f64,
    pub beta_kl: f64,
    pub sim_cost: f64,
    pub oracle_j: Option<f64>,
}

/// Writes records as CSV with the [`METRICS_CSV_COLUMNS`] header. Output
/// bytes depend only on the records, so identical runs produce identical
/// files.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    writer.write_record(METRICS_CSV_COLUMNS)?;
    for record in records {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        records.push(row?);
    }
    Ok(records)
}

/// Writes one token-level trace as `position,log_ratio` rows.
pub fn write_token_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["position", "log_ratio"])?;
    for (position, ratio) in trace.iter().enumerate() {
        writer.write_record(&[position.to_string(), ratio.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{FeatureMap, Generation, Vocab};
    use crate::task::Prompt;
    use proptest::prelude::*;

    fn test_policy(theta0: f64) -> Policy {
        Policy::new(FeatureMap::prompt_unigram(1, 2), Vocab::new(2), 1, vec![theta0, 0.0])
    }

    fn prompt() -> Prompt {
        Prompt { id: 0, class: 0, payload: vec![] }
    }

    /// Sample whose importance weight under `policy` is `weight`, up to
    /// floating-point rounding in ln/exp.
    fn sample_with_weight(policy: &Policy, tokens: Vec<u32>, weight: f64) -> Sample {
        let prompt = prompt();
        let logprobs = policy.token_logprobs(&prompt, &tokens).unwrap();
        let behavior_logprob = logprobs.iter().sum::<f64>() - weight.ln();
        Sample {
            prompt,
            generation: Generation { tokens, logprobs },
            reward: 0.0,
            behavior_logprob,
            group_id: 0,
        }
    }

    fn on_policy_sample(policy: &Policy, tokens: Vec<u32>) -> Sample {
        let prompt = prompt();
        let logprobs = policy.token_logprobs(&prompt, &tokens).unwrap();
        let behavior_logprob = logprobs.iter().sum();
        Sample {
            prompt,
            generation: Generation { tokens, logprobs },
            reward: 0.0,
            behavior_logprob,
            group_id: 0,
        }
    }

    #[test]
    fn staleness_is_zero_on_policy() {
        let policy = test_policy(0.4);
        let batch = vec![
            on_policy_sample(&policy, vec![0]),
            on_policy_sample(&policy, vec![1]),
        ];
        assert_eq!(staleness(&batch, &policy, &ClipConfig::off()).unwrap(), 0.0);
        assert_eq!(staleness_signed(&batch, &policy, &ClipConfig::off()).unwrap(), 0.0);
    }

    #[test]
    fn staleness_of_unclipped_pair_matches_arithmetic() {
        let policy = test_policy(0.0);
        let batch = vec![
            sample_with_weight(&policy, vec![0], 1.2),
            sample_with_weight(&policy, vec![1], 0.8),
        ];
        let s = staleness(&batch, &policy, &ClipConfig::off()).unwrap();
        let expected = (1.2f64.ln().abs() + 0.8f64.ln().abs()) / 2.0;
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 0.2027).abs() < 1e-4);
        // Signed variant keeps the cancellation the absolute one removes.
        let signed = staleness_signed(&batch, &policy, &ClipConfig::off()).unwrap();
        let expected_signed = (1.2f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((signed - expected_signed).abs() < 1e-12);
        assert!(signed < s);
    }

    #[test]
    fn staleness_applies_the_clip_rule_before_the_log() {
        let policy = test_policy(0.0);
        let batch = vec![
            sample_with_weight(&policy, vec![0], 3.0f64.exp()),
            sample_with_weight(&policy, vec![1], 1.0),
        ];
        let s = staleness(&batch, &policy, &ClipConfig::cap(2.0)).unwrap();
        assert!((s - 2.0f64.ln() / 2.0).abs() < 1e-12);
        assert!((s - 0.3466).abs() < 1e-4);
        // Without the cap the raw weight e^3 contributes its full log.
        let raw = staleness(&batch, &policy, &ClipConfig::off()).unwrap();
        assert!((raw - 1.5).abs() < 1e-12);
    }

    #[test]
    fn clip_fraction_counts_altered_weights() {
        let policy = test_policy(0.0);
        let batch: Vec<Sample> = [3.0, 1.0, 0.5, 2.5]
            .iter()
            .map(|&w| sample_with_weight(&policy, vec![0], w))
            .collect();
        assert_eq!(clip_fraction(&batch, &policy, &ClipConfig::cap(2.0)).unwrap(), 0.5);
        assert_eq!(
            clip_fraction(&batch, &policy, &ClipConfig::cap(f64::INFINITY)).unwrap(),
            0.0
        );
        let on_policy = vec![
            on_policy_sample(&policy, vec![0]),
            on_policy_sample(&policy, vec![1]),
        ];
        assert_eq!(clip_fraction(&on_policy, &policy, &ClipConfig::cap(2.0)).unwrap(), 0.0);
    }

    #[test]
    fn empty_batches_are_rejected() {
        let policy = test_policy(0.0);
        let empty: Vec<Sample> = vec![];
        assert!(matches!(
            staleness(&empty, &policy, &ClipConfig::off()),
            Err(Error::EmptyBatch)
        ));
        assert!(matches!(
            clip_fraction(&empty, &policy, &ClipConfig::off()),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn token_trace_is_exactly_zero_on_policy() {
        let vocab = Vocab::new(3);
        let map = FeatureMap::tabular_bigram(1, 3, 2);
        let dim = map.dimension();
        let theta: Vec<f64> = (0..dim).map(|i| (i as f64) * 0.01 - 0.3).collect();
        let policy = Policy::new(map, vocab, 3, theta);
        let p = prompt();
        let tokens = vec![2, 0, 1];
        let logprobs = policy.token_logprobs(&p, &tokens).unwrap();
        let sample = Sample {
            prompt: p,
            generation: Generation { tokens, logprobs },
            reward: 0.0,
            behavior_logprob: 0.0,
            group_id: 0,
        };
        let trace = token_weight_trace(&sample, &policy).unwrap();
        assert_eq!(trace.len(), 3);
        assert!(trace.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn token_trace_sums_to_the_sequence_log_weight() {
        let vocab = Vocab::new(3);
        let map = FeatureMap::tabular_bigram(1, 3, 2);
        let dim = map.dimension();
        let current = Policy::new(
            map,
            vocab,
            3,
            (0..dim).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.1).collect(),
        );
        let behavior = Policy::new(
            map,
            vocab,
            3,
            (0..dim).map(|i| ((i * 5 % 11) as f64 - 5.0) * 0.05).collect(),
        );
        let p = prompt();
        let tokens = vec![1, 2, 0];
        let logprobs = behavior.token_logprobs(&p, &tokens).unwrap();
        let behavior_logprob = logprobs.iter().sum();
        let sample = Sample {
            prompt: p,
            generation: Generation { tokens, logprobs },
            reward: 0.0,
            behavior_logprob,
            group_id: 0,
        };
        let trace = token_weight_trace(&sample, &current).unwrap();
        assert_eq!(trace.len(), 3);
        let w = importance_weight(&current, &sample).unwrap();
        assert!((trace.iter().sum::<f64>() - w.ln()).abs() < 1e-10);
    }

    #[test]
    fn pass_at_one_is_mean_accuracy() {
        let flags = vec![vec![true, false, false, false]];
        assert!((pass_at_k(&flags, 1).unwrap() - 0.25).abs() < 1e-12);
        // With one correct generation, a subset of all four must hit it.
        assert_eq!(pass_at_k(&flags, 4).unwrap(), 1.0);
    }

    #[test]
    fn pass_at_k_boundary_cases() {
        let all = vec![vec![true; 4], vec![true; 4]];
        for k in 1..=4 {
            assert_eq!(pass_at_k(&all, k).unwrap(), 1.0);
        }
        let none = vec![vec![false; 4]];
        for k in 1..=4 {
            assert_eq!(pass_at_k(&none, k).unwrap(), 0.0);
        }
        let mixed = vec![vec![true, false, false, false], vec![false; 4]];
        assert!((pass_at_k(&mixed, 1).unwrap() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn pass_at_k_rejects_bad_arity() {
        let flags = vec![vec![true, false]];
        assert!(matches!(
            pass_at_k(&flags, 3),
            Err(Error::PassAtKArity { g: 2, k: 3 })
        ));
        assert!(matches!(pass_at_k(&[], 1), Err(Error::EmptyBatch)));
        assert!(pass_at_k(&flags, 0).is_err());
    }

    #[test]
    fn pearson_exact_linear_relations() {
        let xs = vec![1.0, 2.0, 5.0, 9.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_frozen_example() {
        let xs = [2.0, 4.0, 8.0, 16.0];
        let ys = [0.06, 0.08, 0.11, 0.13];
        let r = pearson(&xs, &ys).unwrap();
        assert!((r - 0.95239).abs() < 1e-5, "r = {r}");
        // Symmetric under argument exchange.
        assert_eq!(r, pearson(&ys, &xs).unwrap());
    }

    #[test]
    fn pearson_rejects_degenerate_series() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0, 2.0], &[3.0, 3.0]).is_err());
        assert!(pearson(&[1.0], &[2.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn cost_model_frozen_examples() {
        let model = CostModel::default();
        // 256 samples drawn step by step in batches of 32 vs all at once.
        let per_step = model.inference_seconds(8, 256);
        let one_shot = model.inference_seconds(1, 256);
        assert!((per_step - 92.8).abs() < 1e-9);
        assert!((one_shot - 22.8).abs() < 1e-9);
        assert!(one_shot < per_step);
        let free_samples = CostModel { b_inf: 0.0, ..CostModel::default() };
        assert_eq!(
            free_samples.inference_seconds(8, 256),
            free_samples.inference_seconds(8, 9999)
        );
    }

    #[test]
    fn phase_cost_adds_inference_and_backprop() {
        let model = CostModel::default();
        let total = simulated_phase_cost(&model, 1, 64, 4, 64);
        let expected = model.inference_seconds(1, 64) + model.backprop_seconds(4, 64);
        assert_eq!(total, expected);
    }

    #[test]
    fn cost_model_validation() {
        assert!(CostModel::default().validate().is_ok());
        assert!(CostModel { a_inf: -1.0, ..CostModel::default() }.validate().is_err());
        assert!(CostModel { b_bp: f64::NAN, ..CostModel::default() }.validate().is_err());
    }

    #[test]
    fn metrics_csv_roundtrip_and_determinism() {
        let records = vec![
            MetricsRecord {
                outer_step: 0,
                inner_step: 0,
                global_step: 0,
                mean_reward: 0.25,
                staleness: 0.0,
                staleness_signed: 0.0,
                clip_fraction: 0.0,
                mean_completion_len: 2.0,
                beta_kl: 0.0,
                sim_cost: 13.2,
                oracle_j: Some(0.25),
            },
            MetricsRecord {
                outer_step: 0,
                inner_step: 1,
                global_step: 1,
                mean_reward: 0.5,
                staleness: 0.031,
                staleness_signed: -0.002,
                clip_fraction: 0.125,
                mean_completion_len: 2.0,
                beta_kl: 0.04,
                sim_cost: 18.4,
                oracle_j: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_metrics_csv(&a, &records).unwrap();
        write_metrics_csv(&b, &records).unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        let bytes_b = std::fs::read(&b).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let header = String::from_utf8(bytes_a.clone()).unwrap();
        assert!(header.starts_with(&METRICS_CSV_COLUMNS.join(",")));
        assert_eq!(read_metrics_csv(&a).unwrap(), records);
    }

    #[test]
    fn token_trace_csv_has_one_row_per_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_token_trace_csv(&path, &[0.0, -0.125, 0.5]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "position,log_ratio");
        assert_eq!(lines[2], "1,-0.125");
    }

    proptest! {
        #[test]
        fn pearson_stays_in_unit_interval(
            pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..30)
        ) {
            let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson(&xs, &ys) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn inference_cost_never_increases_with_batch_size(
            total in 1u64..2000,
            b1 in 1u64..512,
            b2 in 1u64..512,
        ) {
            let model = CostModel::default();
            let (small, large) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let batches = |b: u64| total.div_ceil(b);
            let cost_small = model.inference_seconds(batches(small), total);
            let cost_large = model.inference_seconds(batches(large), total);
            prop_assert!(cost_large <= cost_small + 1e-9);
        }

        #[test]
        fn pass_at_k_is_monotone_in_k(correct in 0usize..=6) {
            let mut flags = vec![false; 6];
            for f in flags.iter_mut().take(correct) {
                *f = true;
            }
            let batch = vec![flags];
            let mut last = 0.0;
            for k in 1..=6 {
                let p = pass_at_k(&batch, k).unwrap();
                prop_assert!(p >= last - 1e-12);
                prop_assert!((0.0..=1.0).contains(&p));
                last = p;
            }
        }
    }
}
