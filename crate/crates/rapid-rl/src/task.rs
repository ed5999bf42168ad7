//! Synthetic prompt sets with deterministic rewards.
//!
//! A task bundles a vocabulary, a maximum generation length, a list of
//! prompts, and a pure reward rule. The built-in rules pay 0 or 1 and are
//! non-degenerate: every prompt admits at least one rewarded and one
//! unrewarded output, so group-relative advantages never collapse.
//! A scalar reward hook ([`Task::custom`]) exists for anything richer.

use crate::error::{Error, Result};
use crate::policy::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// A prompt the policy conditions on. `class` is the only signal the
/// built-in feature maps see; `payload` carries raw tokens for reward
/// rules (every payload entry is a valid vocab token).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u32,
    pub class: u32,
    pub payload: Vec<u32>,
}

type RewardHook = Arc<dyn Fn(&Prompt, &[u32]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum RewardRule {
    /// 1 iff the final output token equals the prompt's target (its class).
    LastTokenMatch,
    /// 1 iff the single output token is (d1 + d2) mod vocab for the two
    /// payload digits.
    SumMod,
    /// 1 iff the single output token is the parity bit of the prompt class.
    Parity,
    /// Arbitrary scalar rewards.
    Custom(RewardHook),
}

impl fmt::Debug for RewardRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardRule::LastTokenMatch => write!(f, "LastTokenMatch"),
            RewardRule::SumMod => write!(f, "SumMod"),
            RewardRule::Parity => write!(f, "Parity"),
            RewardRule::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Size parameters for [`builtin_task`]. Fields irrelevant to a given
/// task are ignored (for example `bits` only matters to `parity`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskParams {
    pub vocab_size: usize,
    pub num_prompts: usize,
    pub max_len: usize,
    pub bits: usize,
    pub seed: u64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams { vocab_size: 8, num_prompts: 16, max_len: 2, bits: 3, seed: 0 }
    }
}

/// A prompt set plus a deterministic reward rule.
#[derive(Debug, Clone)]
pub struct Task {
    name: String,
    vocab: Vocab,
    max_len: usize,
    prompts: Vec<Prompt>,
    rule: RewardRule,
}

impl Task {
    /// `num_prompts` prompts, each with a seeded random target token; the
    /// reward is 1 iff the final output token equals the target.
    pub fn last_token_match(
        vocab_size: usize,
        num_prompts: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Task> {
        check_sizes(vocab_size, num_prompts, max_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = (0..num_prompts)
            .map(|i| {
                let target = rng.gen_range(0..vocab_size as u32);
                Prompt { id: i as u32, class: target, payload: vec![target] }
            })
            .collect();
        Ok(Task {
            name: "last_token_match".into(),
            vocab: Vocab::new(vocab_size),
            max_len,
            prompts,
            rule: RewardRule::LastTokenMatch,
        })
    }

    /// Prompts carry two seeded digits (d1, d2); the reward is 1 iff the
    /// single output token equals (d1 + d2) mod vocab_size. The class
    /// encodes the digit pair, not the answer.
    pub fn sum_mod(vocab_size: usize, num_prompts: usize, seed: u64) -> Result<Task> {
        check_sizes(vocab_size, num_prompts, 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = (0..num_prompts)
            .map(|i| {
                let d1 = rng.gen_range(0..vocab_size as u32);
                let d2 = rng.gen_range(0..vocab_size as u32);
                Prompt {
                    id: i as u32,
                    class: d1 * vocab_size as u32 + d2,
                    payload: vec![d1, d2],
                }
            })
            .collect();
        Ok(Task {
            name: "sum_mod".into(),
            vocab: Vocab::new(vocab_size),
            max_len: 1,
            prompts,
            rule: RewardRule::SumMod,
        })
    }

    /// One prompt per `bits`-bit string (class = its value); the reward is
    /// 1 iff the single binary output token equals the string's parity bit.
    pub fn parity(bits: usize) -> Result<Task> {
        if !(1..=16).contains(&bits) {
            return Err(Error::config(format!("parity bits must be in 1..=16, got {bits}")));
        }
        let prompts = (0..(1u32 << bits))
            .map(|value| {
                let payload = (0..bits).map(|b| (value >> b) & 1).collect();
                Prompt { id: value, class: value, payload }
            })
            .collect();
        Ok(Task {
            name: "parity".into(),
            vocab: Vocab::new(2),
            max_len: 1,
            prompts,
            rule: RewardRule::Parity,
        })
    }

    /// A task with an arbitrary scalar reward hook.
    pub fn custom(
        name: impl Into<String>,
        vocab: Vocab,
        max_len: usize,
        prompts: Vec<Prompt>,
        reward: impl Fn(&Prompt, &[u32]) -> f64 + Send + Sync + 'static,
    ) -> Task {
        assert!(max_len >= 1);
        assert!(!prompts.is_empty(), "a task needs at least one prompt");
        Task {
            name: name.into(),
            vocab,
            max_len,
            prompts,
            rule: RewardRule::Custom(Arc::new(reward)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    /// One more than the largest prompt class: the number of classes a
    /// feature map must be able to distinguish.
    pub fn num_classes(&self) -> usize {
        self.prompts.iter().map(|p| p.class as usize).max().unwrap_or(0) + 1
    }

    pub fn prompt_by_id(&self, id: u32) -> Result<&Prompt> {
        self.prompts
            .iter()
            .find(|p| p.id == id)
            .ok_or(Error::UnknownPrompt(id))
    }

    /// Reward for `tokens` under the prompt with the given id.
    pub fn reward(&self, prompt_id: u32, tokens: &[u32]) -> Result<f64> {
        Ok(self.reward_for(self.prompt_by_id(prompt_id)?, tokens))
    }

    /// Reward for `tokens` under `prompt`. Pure and deterministic.
    pub fn reward_for(&self, prompt: &Prompt, tokens: &[u32]) -> f64 {
        match &self.rule {
            RewardRule::LastTokenMatch => {
                if tokens.last() == Some(&prompt.class) {
                    1.0
                } else {
                    0.0
                }
            }
            RewardRule::SumMod => {
                let target = (prompt.payload[0] + prompt.payload[1]) % self.vocab.size() as u32;
                if tokens == [target] {
                    1.0
                } else {
                    0.0
                }
            }
            RewardRule::Parity => {
                let parity = prompt.class.count_ones() % 2;
                if tokens == [parity] {
                    1.0
                } else {
                    0.0
                }
            }
            RewardRule::Custom(f) => f(prompt, tokens),
        }
    }
}

fn check_sizes(vocab_size: usize, num_prompts: usize, max_len: usize) -> Result<()> {
    if vocab_size < 2 {
        return Err(Error::config(format!("vocab size must be at least 2, got {vocab_size}")));
    }
    if num_prompts < 1 {
        return Err(Error::config("a task needs at least one prompt"));
    }
    if max_len < 1 {
        return Err(Error::config("max_len must be at least 1"));
    }
    Ok(())
}

/// Builds a built-in task by name: `last_token_match`, `sum_mod`, or
/// `parity` (case-insensitive, underscores optional).
pub fn builtin_task(name: &str, params: &TaskParams) -> Result<Task> {
    let key: String = name
        .chars()
        .filter(|c| *c != '_' && *c != '-')
        .collect::<String>()
        .to_ascii_lowercase();
    match key.as_str() {
        "lasttokenmatch" => {
            Task::last_token_match(params.vocab_size, params.num_prompts, params.max_len, params.seed)
        }
        "summod" => Task::sum_mod(params.vocab_size, params.num_prompts, params.seed),
        "parity" => Task::parity(params.bits),
        _ => Err(Error::UnknownTask(name.into())),
    }
}
