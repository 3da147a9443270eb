//! Keyword-indicator classification tasks.
//!
//! A family rule fixes one keyword set per class and a background pool.
//! Each example contains a dominant run of keywords from its label's set,
//! fewer keywords from one other class, and background filler. Tasks of
//! the same family share the rule and differ only in their sampling seed.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{argmax, FrozenToyModel};
use super::TunerError;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: u32,
}

fn default_seq_len() -> usize {
    12
}

fn default_keywords() -> usize {
    6
}

fn default_background() -> usize {
    24
}

/// Serializable task definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub family: String,
    /// Seeds the family's generative rule; equal within a family.
    pub rule_seed: u64,
    /// Seeds example sampling; distinguishes tasks within a family.
    pub sample_seed: u64,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    #[serde(rename = "C")]
    pub class_count: usize,
    pub train_examples: usize,
    pub val_examples: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_keywords")]
    pub keywords_per_class: usize,
    #[serde(default = "default_background")]
    pub background_size: usize,
    /// Class favored by the background pool; drawn from `rule_seed` when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoy_class: Option<u32>,
}

/// The shared generative rule of a task family.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordRule {
    pub keywords: Vec<Vec<u32>>,
    pub background: Vec<u32>,
    /// Class favored by the background pool.
    pub decoy_class: u32,
}

impl KeywordRule {
    /// Builds the rule for `rule_seed`. Keyword sets are drawn from tokens
    /// the frozen head already scores highest for each class, so every
    /// family is learnable by prompt tuning alone; the background pool is
    /// drawn from tokens favoring the decoy class.
    pub fn derive(model: &FrozenToyModel, spec: &TaskSpec) -> Result<Self, TunerError> {
        let c = model.class_count();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rule_seed);
        let mut by_class: Vec<Vec<(u32, f64)>> = vec![Vec::new(); c];
        for t in 0..model.vocab_size() {
            let s = model.token_scores(t);
            let best = argmax(&s);
            let runner_up = s
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != best)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            by_class[best].push((t as u32, s[best] - runner_up));
        }
        let mut keywords = Vec::with_capacity(c);
        for (class, cands) in by_class.iter_mut().enumerate() {
            if cands.len() < spec.keywords_per_class {
                return Err(TunerError::InvalidTask(format!(
                    "class {class} has only {} preferred tokens, need {}",
                    cands.len(),
                    spec.keywords_per_class
                )));
            }
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let top = &cands[..(2 * spec.keywords_per_class).min(cands.len())];
            let mut picked: Vec<u32> = top
                .choose_multiple(&mut rng, spec.keywords_per_class)
                .map(|&(t, _)| t)
                .collect();
            picked.sort_unstable();
            keywords.push(picked);
        }
        let drawn = rng.random_range(0..c) as u32;
        let decoy_class = match spec.decoy_class {
            Some(d) if d as usize >= c => {
                return Err(TunerError::InvalidTask(format!(
                    "decoy class {d} out of range for {c} classes"
                )))
            }
            Some(d) => d,
            None => drawn,
        };
        let used: HashSet<u32> = keywords.iter().flatten().copied().collect();
        let pool: Vec<u32> = by_class[decoy_class as usize]
            .iter()
            .map(|&(t, _)| t)
            .filter(|t| !used.contains(t))
            .collect();
        if pool.is_empty() {
            return Err(TunerError::InvalidTask(
                "no background tokens left for the decoy class".into(),
            ));
        }
        let mut background: Vec<u32> = pool
            .choose_multiple(&mut rng, spec.background_size.min(pool.len()))
            .copied()
            .collect();
        background.sort_unstable();
        Ok(Self {
            keywords,
            background,
            decoy_class,
        })
    }

    fn sample(&self, seq_len: usize, rng: &mut ChaCha8Rng) -> Example {
        let c = self.keywords.len();
        let label = rng.random_range(0..c);
        let dominant = (seq_len / 4).max(2);
        let mut tokens = Vec::with_capacity(seq_len);
        for _ in 0..dominant {
            tokens.push(*self.keywords[label].choose(rng).expect("nonempty"));
        }
        if c > 1 {
            let mut other = rng.random_range(0..c - 1);
            if other >= label {
                other += 1;
            }
            let minority = rng.random_range(0..dominant);
            for _ in 0..minority {
                tokens.push(*self.keywords[other].choose(rng).expect("nonempty"));
            }
        }
        while tokens.len() < seq_len {
            tokens.push(*self.background.choose(rng).expect("nonempty"));
        }
        tokens.shuffle(rng);
        Example {
            tokens,
            label: label as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

impl ToyTask {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn family(&self) -> &str {
        &self.spec.family
    }

    /// Samples distinct examples for both splits, so validation never
    /// repeats a training sequence.
    pub fn generate(model: &FrozenToyModel, spec: &TaskSpec) -> Result<Self, TunerError> {
        if spec.vocab_size != model.vocab_size() || spec.class_count != model.class_count() {
            return Err(TunerError::InvalidTask(format!(
                "task '{}' declares V={}, C={} but the model has V={}, C={}",
                spec.name,
                spec.vocab_size,
                spec.class_count,
                model.vocab_size(),
                model.class_count()
            )));
        }
        if spec.train_examples == 0 || spec.val_examples == 0 {
            return Err(TunerError::InvalidTask(format!(
                "task '{}' needs nonempty train and validation splits",
                spec.name
            )));
        }
        if spec.seq_len < 3 || spec.keywords_per_class == 0 {
            return Err(TunerError::InvalidTask(format!(
                "task '{}': seq_len must be at least 3 and keywords_per_class positive",
                spec.name
            )));
        }
        let rule = KeywordRule::derive(model, spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.sample_seed);
        let wanted = spec.train_examples + spec.val_examples;
        let mut seen = HashSet::with_capacity(wanted);
        let mut examples = Vec::with_capacity(wanted);
        let mut attempts = 0usize;
        while examples.len() < wanted {
            attempts += 1;
            if attempts > 100 * wanted {
                return Err(TunerError::InvalidTask(format!(
                    "task '{}': could not draw {wanted} distinct examples",
                    spec.name
                )));
            }
            let ex = rule.sample(spec.seq_len, &mut rng);
            if seen.insert(ex.tokens.clone()) {
                examples.push(ex);
            }
        }
        let validation = examples.split_off(spec.train_examples);
        Ok(Self {
            spec: spec.clone(),
            train: examples,
            validation,
        })
    }
}
