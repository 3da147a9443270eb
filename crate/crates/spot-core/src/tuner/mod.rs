//! Desk-scale prompt tuning against a frozen toy model.
//!
//! Only the prompt receives gradient updates. Runs are plain seeded
//! minibatch gradient descent with a constant learning rate, checkpointing
//! on a fixed schedule and scoring each checkpoint on the validation split.

pub mod model;
pub mod task;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use model::{softmax, FrozenToyModel, ModelConfig};
pub use task::{Example, KeywordRule, TaskSpec, ToyTask};

use crate::prompt::{Matrix, Prompt, PromptError, TaskEmbedding};

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenIdOutOfRange { id: u32, vocab_size: usize },
    #[error("label {label} out of range for {class_count} classes")]
    LabelOutOfRange { label: u32, class_count: usize },
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("prompt width {found} does not match model width {expected}")]
    PromptWidth { expected: usize, found: usize },
    #[error("top_n = {top_n} out of range 1..={vocab_size}")]
    TopNOutOfRange { top_n: usize, vocab_size: usize },
    #[error("run already has checkpoints")]
    AlreadyTuned,
    #[error("run has no checkpoints")]
    NoCheckpoints,
    #[error("step {0} was not checkpointed")]
    StepNotCheckpointed(u64),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Fills each prompt row with a copy of a token-table row whose index is
/// drawn uniformly from the `top_n` most common tokens. Token ids are in
/// frequency order, so the most common tokens are `0..top_n`.
pub fn init_prompt_from_vocab(
    model: &FrozenToyModel,
    prompt_len: usize,
    top_n: usize,
    rng: &mut impl Rng,
) -> Result<Matrix<f64>, TunerError> {
    if top_n == 0 || top_n > model.vocab_size() {
        return Err(TunerError::TopNOutOfRange {
            top_n,
            vocab_size: model.vocab_size(),
        });
    }
    if prompt_len == 0 {
        return Err(PromptError::InvalidShape {
            rows: 0,
            cols: model.embed_dim(),
        }
        .into());
    }
    let mut data = Vec::with_capacity(prompt_len * model.embed_dim());
    for _ in 0..prompt_len {
        let t = rng.random_range(0..top_n);
        data.extend_from_slice(model.token_table().row(t));
    }
    Ok(Matrix::from_vec(prompt_len, model.embed_dim(), data)?)
}

/// Percent of `split` the model classifies correctly with `prompt`.
pub fn evaluate(
    model: &FrozenToyModel,
    prompt: &Prompt<f64>,
    split: &[Example],
) -> Result<f64, TunerError> {
    if split.is_empty() {
        return Err(TunerError::EmptySplit);
    }
    let mut correct = 0usize;
    for ex in split {
        if model.predict(prompt, &ex.tokens)? == ex.label as usize {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / split.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PromptInit {
    /// Rows copied from the `top_n` most common vocabulary embeddings.
    VocabSampled { prompt_len: usize, top_n: usize },
    /// Start from an existing prompt (source transfer).
    Transferred(Prompt<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: u64,
    pub checkpoint_every: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 2000,
            checkpoint_every: 50,
            learning_rate: 0.1,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub prompt: Prompt<f64>,
    pub validation_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningRun {
    pub task: ToyTask,
    pub init: PromptInit,
    pub schedule: Schedule,
    pub seed: u32,
    pub checkpoints: Vec<Checkpoint>,
}

impl TuningRun {
    pub fn new(task: ToyTask, init: PromptInit, schedule: Schedule, seed: u32) -> Self {
        Self {
            task,
            init,
            schedule,
            seed,
            checkpoints: Vec::new(),
        }
    }

    /// Steps at which checkpoints are recorded: every multiple of
    /// `checkpoint_every` up to `steps`, plus `steps` itself.
    pub fn checkpoint_steps(schedule: &Schedule) -> Vec<u64> {
        let mut steps: Vec<u64> = (1..)
            .map(|k| k * schedule.checkpoint_every)
            .take_while(|&s| s <= schedule.steps)
            .collect();
        if steps.last() != Some(&schedule.steps) {
            steps.push(schedule.steps);
        }
        steps
    }

    pub fn final_checkpoint(&self) -> Result<&Checkpoint, TunerError> {
        self.checkpoints.last().ok_or(TunerError::NoCheckpoints)
    }
}

fn validate_schedule(s: &Schedule) -> Result<(), TunerError> {
    if s.steps == 0 || s.checkpoint_every == 0 || s.batch_size == 0 {
        return Err(TunerError::InvalidConfig(
            "steps, checkpoint_every and batch_size must be positive".into(),
        ));
    }
    if !(s.learning_rate.is_finite() && s.learning_rate >= 0.0) {
        return Err(TunerError::InvalidConfig(format!(
            "learning rate {} must be finite and non-negative",
            s.learning_rate
        )));
    }
    Ok(())
}

/// Builds the starting prompt of a run. Vocabulary sampling draws from
/// [`init_rng`], so the minibatch order of a run depends on its seed alone
/// and not on how its prompt was initialized.
pub fn initial_prompt(model: &FrozenToyModel, run: &TuningRun) -> Result<Prompt<f64>, TunerError> {
    let rng = &mut init_rng(&run.task.spec, run.seed);
    let tokens = match &run.init {
        PromptInit::VocabSampled { prompt_len, top_n } => {
            init_prompt_from_vocab(model, *prompt_len, *top_n, rng)?
        }
        PromptInit::Transferred(p) => {
            if p.width() != model.embed_dim() {
                return Err(TunerError::PromptWidth {
                    expected: model.embed_dim(),
                    found: p.width(),
                });
            }
            p.tokens.clone()
        }
    };
    Ok(Prompt::new(tokens, run.task.name(), run.seed, 0))
}

/// Key of a run's random streams: the run seed mixed with the task's rule
/// and sampling seeds, so equal run seeds on different tasks stay
/// independent.
pub fn stream_key(task: &TaskSpec, seed: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(task.rule_seed.to_le_bytes());
    h.update(task.sample_seed.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Minibatch stream of a run.
pub fn run_rng(task: &TaskSpec, seed: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(task, seed))
}

/// Prompt-initialization stream of a run, independent of [`run_rng`].
pub fn init_rng(task: &TaskSpec, seed: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(task, seed));
    rng.set_stream(1);
    rng
}

/// Runs the schedule and returns the run with its checkpoints filled in.
pub fn tune(model: &FrozenToyModel, mut run: TuningRun) -> Result<TuningRun, TunerError> {
    if !run.checkpoints.is_empty() {
        return Err(TunerError::AlreadyTuned);
    }
    validate_schedule(&run.schedule)?;
    if run.task.train.is_empty() {
        return Err(TunerError::EmptyBatch);
    }
    let mut rng = run_rng(&run.task.spec, run.seed);
    let mut prompt = initial_prompt(model, &run)?;
    let schedule = run.schedule;
    let record_at = TuningRun::checkpoint_steps(&schedule);
    let mut next_record = record_at.iter().copied().peekable();

    let train = &run.task.train;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(schedule.batch_size);
    let mut checkpoints = Vec::with_capacity(record_at.len());

    for step in 1..=schedule.steps {
        batch.clear();
        while batch.len() < schedule.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let grad = model.prompt_gradient(&prompt, &batch)?;
        prompt.tokens.add_scaled(&grad, -schedule.learning_rate)?;
        prompt.step = step;
        if next_record.peek() == Some(&step) {
            next_record.next();
            checkpoints.push(Checkpoint {
                step,
                validation_score: evaluate(model, &prompt, &run.task.validation)?,
                prompt: prompt.clone(),
            });
        }
    }
    run.checkpoints = checkpoints;
    Ok(run)
}

/// The checkpoint with the highest validation score; earliest on ties.
pub fn select_best_checkpoint(run: &TuningRun) -> Result<&Checkpoint, TunerError> {
    let mut best: Option<&Checkpoint> = None;
    for c in &run.checkpoints {
        if best.is_none_or(|b| c.validation_score > b.validation_score) {
            best = Some(c);
        }
    }
    best.ok_or(TunerError::NoCheckpoints)
}

/// The prompt checkpoint recorded at exactly `embed_step`.
pub fn extract_task_embedding(
    run: &TuningRun,
    embed_step: u64,
) -> Result<TaskEmbedding<f64>, TunerError> {
    let c = run
        .checkpoints
        .iter()
        .find(|c| c.step == embed_step)
        .ok_or(TunerError::StepNotCheckpointed(embed_step))?;
    Ok(TaskEmbedding::new(c.prompt.clone(), embed_step).expect("checkpoint step matches"))
}
