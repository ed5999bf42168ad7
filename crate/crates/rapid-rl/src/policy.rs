//! Log-linear autoregressive policies over a finite vocabulary.
//!
//! A policy scores a candidate next token by summing the weights of the
//! sparse feature slots active for `(prompt, prefix, candidate)` and
//! normalizes the scores with a softmax. Because the feature maps are
//! tabular and the output space is finite, everything about the policy is
//! exactly computable: per-step distributions, sequence log-probabilities,
//! closed-form score-function gradients, and full enumeration of the
//! output space with probabilities.
//!
//! Temperature is fixed at 1; sharpen or flatten a policy by scaling
//! `theta` instead.

use crate::error::{Error, Result};
use crate::task::Prompt;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Default cap on how many sequences [`Policy::enumerate_outputs`] will visit.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Token alphabet. `eos`, when set, terminates a generation early;
/// without it every generation runs to the policy's `max_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos: Option<u32>,
}

impl Vocab {
    /// A vocabulary of `size` tokens (`0..size`) with no end-of-sequence token.
    pub fn new(size: usize) -> Self {
        assert!(size >= 2, "vocab needs at least 2 tokens, got {size}");
        Vocab { size, eos: None }
    }

    /// A vocabulary where emitting `eos` terminates the sequence.
    pub fn with_eos(size: usize, eos: u32) -> Self {
        assert!(size >= 2, "vocab needs at least 2 tokens, got {size}");
        assert!((eos as usize) < size, "eos token {eos} outside vocab of size {size}");
        Vocab { size, eos: Some(eos) }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Option<u32> {
        self.eos
    }

    pub fn contains(&self, token: u32) -> bool {
        (token as usize) < self.size
    }
}

/// Sparse feature function over `(prompt, prefix, candidate)` triples.
///
/// Both built-in maps emit exactly one unit-weight index per triple; the
/// interface still exposes index *sets* so richer maps can be added
/// without touching callers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMap {
    /// One slot per (prompt class, candidate token). Position-blind: the
    /// next-token distribution depends only on the prompt's class.
    PromptUnigram { classes: usize, vocab: usize },
    /// One slot per (context, position bucket, candidate token) where the
    /// context is the previous token, or the prompt class at position 0.
    /// Positions at or past `position_buckets - 1` share the last bucket.
    TabularBigram {
        classes: usize,
        vocab: usize,
        position_buckets: usize,
    },
}

impl FeatureMap {
    pub fn prompt_unigram(classes: usize, vocab: usize) -> Self {
        assert!(classes >= 1 && vocab >= 2);
        FeatureMap::PromptUnigram { classes, vocab }
    }

    pub fn tabular_bigram(classes: usize, vocab: usize, position_buckets: usize) -> Self {
        assert!(classes >= 1 && vocab >= 2 && position_buckets >= 1);
        FeatureMap::TabularBigram { classes, vocab, position_buckets }
    }

    /// Number of feature slots; `Policy::theta` has exactly this length.
    pub fn dimension(&self) -> usize {
        match *self {
            FeatureMap::PromptUnigram { classes, vocab } => classes * vocab,
            FeatureMap::TabularBigram { classes, vocab, position_buckets } => {
                (classes + vocab) * position_buckets * vocab
            }
        }
    }

    /// Number of prompt classes the map can distinguish.
    pub fn classes(&self) -> usize {
        match *self {
            FeatureMap::PromptUnigram { classes, .. } => classes,
            FeatureMap::TabularBigram { classes, .. } => classes,
        }
    }

    /// Calls `f` with each active index for the triple. Deterministic, and
    /// every index is below [`FeatureMap::dimension`].
    pub fn for_each_index(
        &self,
        prompt: &Prompt,
        prefix: &[u32],
        candidate: u32,
        mut f: impl FnMut(usize),
    ) {
        let class = prompt.class as usize;
        match *self {
            FeatureMap::PromptUnigram { classes, vocab } => {
                assert!(class < classes, "prompt class {class} outside map classes {classes}");
                assert!((candidate as usize) < vocab);
                f(class * vocab + candidate as usize);
            }
            FeatureMap::TabularBigram { classes, vocab, position_buckets } => {
                assert!(class < classes, "prompt class {class} outside map classes {classes}");
                assert!((candidate as usize) < vocab);
                // Context 0..vocab is "previous token"; vocab..vocab+classes
                // stands in for the missing previous token at position 0.
                let ctx = match prefix.last() {
                    Some(&prev) => {
                        assert!((prev as usize) < vocab);
                        prev as usize
                    }
                    None => vocab + class,
                };
                let bucket = prefix.len().min(position_buckets - 1);
                f((ctx * position_buckets + bucket) * vocab + candidate as usize);
            }
        }
    }

    /// Active indices as a vector. Convenience for tests and inspection.
    pub fn indices(&self, prompt: &Prompt, prefix: &[u32], candidate: u32) -> Vec<usize> {
        let mut out = Vec::with_capacity(1);
        self.for_each_index(prompt, prefix, candidate, |i| out.push(i));
        out
    }
}

/// Dense gradient aligned component-for-component with `Policy::theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(dim: usize) -> Self {
        GradientVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &GradientVector, c: f64) {
        assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.0 {
            *a *= c;
        }
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        assert_eq!(self.0.len(), other.0.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Cosine similarity; `None` when either vector is zero.
    pub fn cosine(&self, other: &GradientVector) -> Option<f64> {
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 {
            None
        } else {
            Some(self.dot(other) / (na * nb))
        }
    }

    /// Largest absolute componentwise difference.
    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        assert_eq!(self.0.len(), other.0.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One sampled output: the tokens plus the per-token log-probabilities the
/// sampling policy assigned at draw time. The recorded values reproduce
/// exactly what re-scoring the same tokens under the unchanged policy
/// returns, which is what makes on-policy importance weights exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
}

impl Generation {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sequence log-probability under the policy that sampled it.
    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Log-linear autoregressive softmax policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    theta: Vec<f64>,
    map: FeatureMap,
    vocab: Vocab,
    max_len: usize,
}

impl Policy {
    pub fn new(map: FeatureMap, vocab: Vocab, max_len: usize, theta: Vec<f64>) -> Self {
        assert!(max_len >= 1, "max_len must be at least 1");
        assert_eq!(
            theta.len(),
            map.dimension(),
            "theta length must equal the feature dimension"
        );
        Policy { theta, map, vocab, max_len }
    }

    /// Uniform policy: all weights zero.
    pub fn zeros(map: FeatureMap, vocab: Vocab, max_len: usize) -> Self {
        let dim = map.dimension();
        Policy::new(map, vocab, max_len, vec![0.0; dim])
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dimension(&self) -> usize {
        self.theta.len()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.max_len {
            return Err(Error::SequenceTooLong { len: tokens.len(), max_len: self.max_len });
        }
        for &t in tokens {
            if !self.vocab.contains(t) {
                return Err(Error::InvalidToken { token: t, vocab_size: self.vocab.size() });
            }
        }
        Ok(())
    }

    /// Next-token distribution after `prefix`. Entries are positive and sum
    /// to 1 up to rounding.
    pub fn next_token_dist(&self, prompt: &Prompt, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.len() >= self.max_len {
            return Err(Error::SequenceTooLong { len: prefix.len() + 1, max_len: self.max_len });
        }
        self.check_tokens(prefix)?;
        let v = self.vocab.size();
        let mut scores = vec![0.0f64; v];
        for (cand, s) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            self.map
                .for_each_index(prompt, prefix, cand as u32, |i| acc += self.theta[i]);
            *s = acc;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in scores.iter_mut() {
            *s /= total;
        }
        Ok(scores)
    }

    /// Per-token log-probabilities of `tokens`, scored autoregressively.
    pub fn token_logprobs(&self, prompt: &Prompt, tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let mut out = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let dist = self.next_token_dist(prompt, &tokens[..t])?;
            out.push(dist[tok as usize].ln());
        }
        Ok(out)
    }

    /// Sequence log-probability: the sum of per-token log-probabilities.
    pub fn sequence_logprob(&self, prompt: &Prompt, tokens: &[u32]) -> Result<f64> {
        Ok(self.token_logprobs(prompt, tokens)?.iter().sum())
    }

    /// Exact score-function gradient of the sequence log-probability:
    /// for each step, the features of the chosen token minus the
    /// probability-weighted features of every candidate.
    pub fn grad_sequence_logprob(&self, prompt: &Prompt, tokens: &[u32]) -> Result<GradientVector> {
        let mut out = GradientVector::zeros(self.dimension());
        self.add_scaled_grad_sequence_logprob(prompt, tokens, 1.0, &mut out)?;
        Ok(out)
    }

    /// Accumulates `scale * grad_sequence_logprob` into `out` without
    /// allocating. Batch gradient loops are built on this.
    pub fn add_scaled_grad_sequence_logprob(
        &self,
        prompt: &Prompt,
        tokens: &[u32],
        scale: f64,
        out: &mut GradientVector,
    ) -> Result<()> {
        assert_eq!(out.dim(), self.dimension());
        self.check_tokens(tokens)?;
        for (t, &tok) in tokens.iter().enumerate() {
            let prefix = &tokens[..t];
            let dist = self.next_token_dist(prompt, prefix)?;
            self.map
                .for_each_index(prompt, prefix, tok, |i| out.0[i] += scale);
            for (cand, &p) in dist.iter().enumerate() {
                self.map
                    .for_each_index(prompt, prefix, cand as u32, |i| out.0[i] -= scale * p);
            }
        }
        Ok(())
    }

    /// Samples one generation. Stops after emitting the eos token (which is
    /// included in the output) or after `max_len` tokens. The recorded
    /// per-token log-probabilities come from the same code path as scoring,
    /// so re-scoring the tokens under this unchanged policy reproduces them
    /// bit for bit.
    pub fn sample_generation(&self, prompt: &Prompt, rng: &mut impl Rng) -> Generation {
        let mut tokens: Vec<u32> = Vec::new();
        let mut logprobs: Vec<f64> = Vec::new();
        for _ in 0..self.max_len {
            let dist = self
                .next_token_dist(prompt, &tokens)
                .expect("sampling prefix is always valid");
            let u: f64 = rng.gen();
            let mut chosen = dist.len() - 1;
            let mut acc = 0.0;
            for (v, &p) in dist.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = v;
                    break;
                }
            }
            tokens.push(chosen as u32);
            logprobs.push(dist[chosen].ln());
            if Some(chosen as u32) == self.vocab.eos() {
                break;
            }
        }
        Generation { tokens, logprobs }
    }

    /// Enumerates every terminated output with its exact probability, in
    /// depth-first token order. Errors when `vocab_size^max_len` exceeds
    /// `cap`. Probabilities sum to 1 up to rounding.
    pub fn enumerate_outputs(&self, prompt: &Prompt, cap: u64) -> Result<Vec<(Vec<u32>, f64)>> {
        let needed = (self.vocab.size() as u128)
            .checked_pow(self.max_len as u32)
            .unwrap_or(u128::MAX);
        if needed > cap as u128 {
            return Err(Error::EnumerationCap { needed, cap });
        }
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(self.max_len);
        self.enumerate_rec(prompt, &mut prefix, 1.0, &mut out)?;
        Ok(out)
    }

    fn enumerate_rec(
        &self,
        prompt: &Prompt,
        prefix: &mut Vec<u32>,
        prob: f64,
        out: &mut Vec<(Vec<u32>, f64)>,
    ) -> Result<()> {
        let dist = self.next_token_dist(prompt, prefix)?;
        for (v, &p) in dist.iter().enumerate() {
            let tok = v as u32;
            prefix.push(tok);
            if Some(tok) == self.vocab.eos() || prefix.len() == self.max_len {
                out.push((prefix.clone(), prob * p));
            } else {
                self.enumerate_rec(prompt, prefix, prob * p, out)?;
            }
            prefix.pop();
        }
        Ok(())
    }
}
