//! End-to-end toy experiments: source tuning into a prompt library, task
//! and target embeddings, the three transfer methods, and full
//! source × target sweeps feeding the analysis module.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{export_clustered_heatmap, AnalysisError, Dendrogram, TransferTable, BASELINE};
use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
use crate::library::{
    open_library, write_manifest, Library, LibraryError, ManifestEntry, ManifestFile, MANIFEST_FILE,
};
use crate::prompt::{cross_run_similarity, Matrix, Prompt, PromptError, SimilarityMetric, TaskEmbedding};
use crate::retrieval::{
    alpha_weights, best_of_top_k_plan, compose_mixture, mixture_rates, rank_library, select_best,
    top_k_tasks, weighted_average_prompt, RankedSource, RetrievalError, DEFAULT_MIXING_CAP,
};
use crate::tuner::{
    extract_task_embedding, select_best_checkpoint, stream_key, tune, Checkpoint, FrozenToyModel,
    ModelConfig, PromptInit, Schedule, TaskSpec, ToyTask, TunerError, TuningRun,
};

pub const CONFIG_FILE: &str = "config.json";
pub const RUNS_FILE: &str = "runs.json";
pub const TASK_SIMILARITY_FILE: &str = "task_similarity.csv";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tuner(#[from] TunerError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("target embedding is at step {found}, the library uses embed_step {expected}")]
    EmbedStep { expected: u64, found: u64 },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {path}: {message}")]
    Json { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub source_steps: u64,
    pub target_steps: u64,
    pub checkpoint_every: u64,
    pub embed_step: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            source_steps: 2000,
            target_steps: 300,
            checkpoint_every: 50,
            embed_step: 100,
            learning_rate: 0.1,
            batch_size: 16,
        }
    }
}

fn default_prompt_len() -> usize {
    3
}

fn default_seeds() -> Vec<u32> {
    vec![0, 1, 2]
}

fn default_k_values() -> Vec<usize> {
    vec![1, 3]
}

fn default_cap() -> u64 {
    DEFAULT_MIXING_CAP
}

/// A reproducible toy experiment. Every random choice derives from the
/// seeds recorded here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(rename = "L", default = "default_prompt_len")]
    pub prompt_len: usize,
    /// Vocabulary-sampled prompts copy rows of the `top_n` most common
    /// tokens; the whole vocabulary when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_n: Option<usize>,
    pub source_tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub target_tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u32>,
    #[serde(default)]
    pub metric: SimilarityMetric,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    #[serde(default = "default_cap")]
    pub mixing_cap: u64,
}

/// Family names of the default toy setup.
pub const TOY_FAMILIES: [&str; 4] = ["alpha", "beta", "gamma", "delta"];

impl ExperimentConfig {
    /// Four task families of four source tasks each, plus one low-resource
    /// target task per family. Each family's background favors a
    /// different class.
    pub fn toy_default() -> Self {
        let model = ModelConfig::default();
        let task = |family: usize, name: String, sample_seed: u64, train: usize| TaskSpec {
            name,
            family: TOY_FAMILIES[family].to_string(),
            rule_seed: 100 + family as u64,
            sample_seed,
            vocab_size: model.vocab_size,
            class_count: model.class_count,
            train_examples: train,
            val_examples: 200,
            seq_len: 12,
            keywords_per_class: 6,
            background_size: 24,
            decoy_class: Some((family % model.class_count) as u32),
        };
        let mut source_tasks = Vec::new();
        let mut target_tasks = Vec::new();
        for (f, fam) in TOY_FAMILIES.iter().enumerate() {
            for i in 1..=4u64 {
                source_tasks.push(task(f, format!("{fam}-{i}"), 10 * f as u64 + i, 400));
            }
            target_tasks.push(task(f, format!("{fam}-target"), 1000 + f as u64, 64));
        }
        Self {
            model,
            prompt_len: default_prompt_len(),
            top_n: None,
            source_tasks,
            target_tasks,
            schedule: ScheduleConfig::default(),
            seeds: default_seeds(),
            metric: SimilarityMetric::AvgTokens,
            k_values: default_k_values(),
            mixing_cap: DEFAULT_MIXING_CAP,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn top_n(&self) -> usize {
        self.top_n.unwrap_or(self.model.vocab_size)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let s = &self.schedule;
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.source_tasks.is_empty() {
            return bad("at least one source task is required".into());
        }
        if self.prompt_len == 0 {
            return bad("L must be positive".into());
        }
        if self.top_n() == 0 || self.top_n() > self.model.vocab_size {
            return bad(format!(
                "top_n {} out of range 1..={}",
                self.top_n(),
                self.model.vocab_size
            ));
        }
        if s.source_steps == 0 || s.target_steps == 0 || s.checkpoint_every == 0 || s.batch_size == 0
        {
            return bad("schedule steps, checkpoint_every and batch_size must be positive".into());
        }
        if !(s.learning_rate.is_finite() && s.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", s.learning_rate));
        }
        let embed_recorded = s.embed_step > 0
            && s.embed_step <= s.source_steps
            && (s.embed_step % s.checkpoint_every == 0 || s.embed_step == s.source_steps);
        if !embed_recorded {
            return bad(format!(
                "embed_step {} is not a checkpoint step of the source schedule",
                s.embed_step
            ));
        }
        if self.k_values.contains(&0) {
            return bad("k values must be positive".into());
        }
        if self.mixing_cap == 0 {
            return bad("mixing_cap must be positive".into());
        }
        let mut names = BTreeSet::new();
        for t in self.source_tasks.iter().chain(&self.target_tasks) {
            let valid_name = !t.name.is_empty()
                && t.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
                && !t.name.starts_with('.');
            if !valid_name {
                return bad(format!(
                    "task name '{}' must be nonempty ASCII letters, digits, '-', '_' or '.'",
                    t.name
                ));
            }
            if t.name == BASELINE {
                return bad(format!("task name '{BASELINE}' is reserved"));
            }
            if !names.insert(t.name.as_str()) {
                return bad(format!("task '{}' is defined twice", t.name));
            }
            if t.vocab_size != self.model.vocab_size || t.class_count != self.model.class_count {
                return bad(format!(
                    "task '{}' declares V={}, C={} but the model has V={}, C={}",
                    t.name, t.vocab_size, t.class_count, self.model.vocab_size, self.model.class_count
                ));
            }
        }
        Ok(())
    }
}

/// How a target prompt is initialized from the ranked library.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMethod {
    BestOfTopK,
    WeightedAverage,
    Mixture,
}

impl FromStr for TransferMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "best-of-top-k" => Ok(Self::BestOfTopK),
            "weighted-average" => Ok(Self::WeightedAverage),
            "mixture" => Ok(Self::Mixture),
            other => Err(format!(
                "unknown method '{other}' (expected best-of-top-k, weighted-average or mixture)"
            )),
        }
    }
}

impl std::fmt::Display for TransferMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BestOfTopK => "best-of-top-k",
            Self::WeightedAverage => "weighted-average",
            Self::Mixture => "mixture",
        })
    }
}

/// Which checkpoint of the mixture run initializes the target run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixtureCheckpoint {
    #[default]
    Final,
    Best,
}

impl FromStr for MixtureCheckpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "final" => Ok(Self::Final),
            "best" => Ok(Self::Best),
            other => Err(format!("unknown checkpoint '{other}' (expected final or best)")),
        }
    }
}

/// One target tuning run started from a candidate initialization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateOutcome {
    pub label: String,
    /// Best validation score of the target run.
    pub score: f64,
    pub best_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub target: String,
    pub method: TransferMethod,
    pub k: usize,
    /// The top-k retrieved sources.
    pub retrieved: Vec<RankedSource<f64>>,
    /// Tasks mixed with the target (mixture method only).
    pub mixture_tasks: Vec<String>,
    pub candidates: Vec<CandidateOutcome>,
    /// Index into `candidates` of the kept result.
    pub chosen: usize,
    /// Best-validation prompt of the kept target run.
    pub prompt: Prompt<f64>,
}

impl TransferOutcome {
    pub fn score(&self) -> f64 {
        self.candidates[self.chosen].score
    }
}

/// Per-run record written next to the library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub task: String,
    pub seed: u32,
    pub checkpoints: Vec<CheckpointRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRecord {
    pub step: u64,
    pub val_score: f64,
    /// Relative to the library directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunsFile {
    pub runs: Vec<RunRecord>,
}

/// One (source prompt, target) observation of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub target: String,
    pub source: String,
    pub seed: u32,
    /// Similarity to the target, averaged over the target's runs.
    pub similarity: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub table: TransferTable<f64>,
    pub points: Vec<PromptPoint>,
}

pub fn points_to_csv(points: &[PromptPoint]) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p)
            .map_err(|e| AnalysisError::Csv(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| AnalysisError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn points_from_csv(text: &str) -> Result<Vec<PromptPoint>, ExperimentError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| AnalysisError::Csv(e.to_string()).into()))
        .collect()
}

/// Same-family transfer against the vocabulary-sampled baseline for one
/// seed set, both scored by final validation accuracy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferTrial {
    pub source: String,
    pub target: String,
    pub transferred: f64,
    pub baseline: f64,
}

/// Mean embedding similarity among runs of one task and between that task
/// and a task of another family, for one seed set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteringTrial {
    pub task: String,
    pub other: String,
    pub within: f64,
    pub across: f64,
}

/// A validated config with its frozen model.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: FrozenToyModel,
}

fn checkpoint_rel_path(task: &str, seed: u32, step: u64) -> String {
    format!("prompts/{task}/seed{seed}/step{step}.spot")
}

fn target_embedding_rel_path(task: &str, seed: u32) -> String {
    format!("targets/{task}/seed{seed}/embedding.spot")
}

/// Highest-validation checkpoint at or after `min_step`; earliest on ties.
fn best_from<'a>(
    checkpoints: impl IntoIterator<Item = (u64, f64, &'a str)>,
    min_step: u64,
) -> Option<(u64, f64, &'a str)> {
    let mut best: Option<(u64, f64, &str)> = None;
    for c in checkpoints.into_iter().filter(|c| c.0 >= min_step) {
        if best.is_none_or(|b| c.1 > b.1) {
            best = Some(c);
        }
    }
    best
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        let model = FrozenToyModel::new(&config.model)?;
        Ok(Self { config, model })
    }

    pub fn task_spec(&self, name: &str) -> Result<&TaskSpec, ExperimentError> {
        self.config
            .source_tasks
            .iter()
            .chain(&self.config.target_tasks)
            .find(|t| t.name == name)
            .ok_or_else(|| ExperimentError::UnknownTask(name.to_string()))
    }

    pub fn task(&self, name: &str) -> Result<ToyTask, ExperimentError> {
        Ok(ToyTask::generate(&self.model, self.task_spec(name)?)?)
    }

    fn schedule(&self, steps: u64) -> Schedule {
        let s = &self.config.schedule;
        Schedule {
            steps,
            checkpoint_every: s.checkpoint_every,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
        }
    }

    pub fn source_schedule(&self) -> Schedule {
        self.schedule(self.config.schedule.source_steps)
    }

    pub fn target_schedule(&self) -> Schedule {
        self.schedule(self.config.schedule.target_steps)
    }

    pub fn vocab_init(&self) -> PromptInit {
        PromptInit::VocabSampled {
            prompt_len: self.config.prompt_len,
            top_n: self.config.top_n(),
        }
    }

    /// Tunes every source task under every seed, task-major. Runs execute
    /// in parallel; the result order does not depend on scheduling.
    pub fn train_sources(&self) -> Result<Vec<TuningRun>, ExperimentError> {
        let tasks = self
            .config
            .source_tasks
            .iter()
            .map(|s| ToyTask::generate(&self.model, s))
            .collect::<Result<Vec<_>, _>>()?;
        let jobs: Vec<(usize, u32)> = (0..tasks.len())
            .flat_map(|t| self.config.seeds.iter().map(move |&s| (t, s)))
            .collect();
        let runs = jobs
            .par_iter()
            .map(|&(t, seed)| {
                log::debug!("tuning source {} seed {seed}", tasks[t].name());
                let run = TuningRun::new(tasks[t].clone(), self.vocab_init(), self.source_schedule(), seed);
                tune(&self.model, run)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(runs)
    }

    /// Writes every checkpoint of `runs`, the run records and the config to
    /// `dir`, then builds the manifest with [`Self::embed`].
    pub fn write_library(&self, runs: &[TuningRun], dir: &Path) -> Result<Library, ExperimentError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut records = Vec::with_capacity(runs.len());
        for run in runs {
            let mut checkpoints = Vec::with_capacity(run.checkpoints.len());
            for c in &run.checkpoints {
                let rel = checkpoint_rel_path(run.task.name(), run.seed, c.step);
                let path = dir.join(&rel);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
                }
                write_checkpoint(&c.prompt, &path, true)?;
                checkpoints.push(CheckpointRecord {
                    step: c.step,
                    val_score: c.validation_score,
                    path: rel,
                });
            }
            records.push(RunRecord {
                task: run.task.name().to_string(),
                seed: run.seed,
                checkpoints,
            });
        }
        write_json(&RunsFile { runs: records }, &dir.join(RUNS_FILE))?;
        write_json(&self.config, &dir.join(CONFIG_FILE))?;
        self.embed(dir, None)
    }

    /// Builds `manifest.json` from the recorded runs: each entry's key is
    /// the checkpoint at `embed_step` (the config's unless overridden) and
    /// its value the best-validation checkpoint at or after it. Also
    /// writes target-task embeddings and the clustered task-similarity
    /// heatmap.
    pub fn embed(&self, dir: &Path, embed_step: Option<u64>) -> Result<Library, ExperimentError> {
        let embed_step = embed_step.unwrap_or(self.config.schedule.embed_step);
        let runs: RunsFile = read_json(&dir.join(RUNS_FILE))?;
        let mut entries = Vec::with_capacity(runs.runs.len());
        for run in &runs.runs {
            let key = run
                .checkpoints
                .iter()
                .find(|c| c.step == embed_step)
                .ok_or(TunerError::StepNotCheckpointed(embed_step))?;
            let (best_step, val_score, best_path) = best_from(
                run.checkpoints.iter().map(|c| (c.step, c.val_score, c.path.as_str())),
                embed_step,
            )
            .expect("the embedding checkpoint qualifies");
            entries.push(ManifestEntry {
                task: run.task.clone(),
                seed: run.seed,
                embedding: key.path.clone(),
                best_prompt: best_path.to_string(),
                best_step,
                val_score,
            });
        }
        let doc = ManifestFile {
            embed_step,
            l: self.config.prompt_len,
            e: self.model.embed_dim(),
            entries,
        };
        let manifest = dir.join(MANIFEST_FILE);
        write_manifest(&doc, &manifest)?;
        let library = open_library(&manifest)?;

        for spec in &self.config.target_tasks {
            let task = ToyTask::generate(&self.model, spec)?;
            for &seed in &self.config.seeds {
                let emb = self.target_embedding_at(&task, seed, embed_step)?;
                let path = dir.join(target_embedding_rel_path(&spec.name, seed));
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
                }
                write_checkpoint(&emb.prompt, &path, true)?;
            }
        }
        let (ids, sim) = task_similarity(&library, self.config.metric)?;
        export_clustered_heatmap(&ids, &sim, &dir.join(TASK_SIMILARITY_FILE))?;
        Ok(library)
    }

    fn target_embedding_at(
        &self,
        task: &ToyTask,
        seed: u32,
        embed_step: u64,
    ) -> Result<TaskEmbedding<f64>, ExperimentError> {
        let run = TuningRun::new(task.clone(), self.vocab_init(), self.schedule(embed_step), seed);
        Ok(extract_task_embedding(&tune(&self.model, run)?, embed_step)?)
    }

    /// The target task's embedding: its vocabulary-initialized prompt after
    /// `embed_step` steps.
    pub fn target_embedding(&self, task: &ToyTask, seed: u32) -> Result<TaskEmbedding<f64>, ExperimentError> {
        self.target_embedding_at(task, seed, self.config.schedule.embed_step)
    }

    fn tune_target(&self, task: &ToyTask, init: Prompt<f64>, seed: u32) -> Result<TuningRun, ExperimentError> {
        let run = TuningRun::new(task.clone(), PromptInit::Transferred(init), self.target_schedule(), seed);
        Ok(tune(&self.model, run)?)
    }

    /// Ranks the library against the target's embedding and runs `method`
    /// over the top `k` sources.
    pub fn transfer(
        &self,
        library: &Library,
        target: &ToyTask,
        method: TransferMethod,
        k: usize,
        seed: u32,
        mixture_checkpoint: MixtureCheckpoint,
    ) -> Result<TransferOutcome, ExperimentError> {
        // library keys are stored at f32; rank the target at the same precision
        let target_emb = self.target_embedding(target, seed)?;
        let rounded = target_emb.prompt.tokens.map(|x| x as f32)?.map(f64::from)?;
        let target_emb = TaskEmbedding::new(
            Prompt::new(rounded, target.name(), seed, target_emb.embed_step),
            target_emb.embed_step,
        )
        .expect("step unchanged");
        let embed_step = library.embed_step;
        if target_emb.embed_step != embed_step {
            return Err(ExperimentError::EmbedStep {
                expected: embed_step,
                found: target_emb.embed_step,
            });
        }
        let ranked = rank_library(&target_emb, library, self.config.metric)?;
        let top = best_of_top_k_plan(&ranked, k)?.to_vec();
        let index_of = |r: &RankedSource<f64>| {
            library
                .entries
                .iter()
                .position(|e| e.task_name == r.entry.task_name && e.run_seed == r.entry.run_seed)
                .expect("ranked entries come from the library")
        };

        let mut mixture_tasks = Vec::new();
        let inits: Vec<(String, Prompt<f64>)> = match method {
            TransferMethod::BestOfTopK => top
                .iter()
                .map(|r| {
                    let p = library.best_prompt(index_of(r))?;
                    Ok((format!("{}/seed{}", r.entry.task_name, r.entry.run_seed), p))
                })
                .collect::<Result<_, ExperimentError>>()?,
            TransferMethod::WeightedAverage => {
                let pairs = top
                    .iter()
                    .map(|r| Ok((library.best_prompt(index_of(r))?, r.similarity)))
                    .collect::<Result<Vec<_>, ExperimentError>>()?;
                let alpha = alpha_weights(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
                log::info!("α weights: {:?}", alpha.weights);
                vec![("weighted-average".to_string(), weighted_average_prompt(&pairs)?)]
            }
            TransferMethod::Mixture => {
                mixture_tasks = top_k_tasks(&ranked, k)?;
                let mixed = self.mixture_prompt(target, &mixture_tasks, seed, mixture_checkpoint)?;
                vec![(format!("mixture({})", mixture_tasks.join("+")), mixed)]
            }
        };

        let runs = inits
            .par_iter()
            .map(|(_, p)| self.tune_target(target, p.clone(), seed))
            .collect::<Result<Vec<_>, _>>()?;
        let mut candidates = Vec::with_capacity(runs.len());
        let mut outcomes = Vec::with_capacity(runs.len());
        for ((label, _), run) in inits.iter().zip(&runs) {
            let best = select_best_checkpoint(run)?;
            candidates.push(CandidateOutcome {
                label: label.clone(),
                score: best.validation_score,
                best_step: best.step,
            });
            outcomes.push((outcomes.len(), best.validation_score));
        }
        let chosen = select_best(&outcomes).expect("k >= 1").0;
        let prompt = select_best_checkpoint(&runs[chosen])?.prompt.clone();
        Ok(TransferOutcome {
            target: target.name().to_string(),
            method,
            k,
            retrieved: top,
            mixture_tasks,
            candidates,
            chosen,
            prompt,
        })
    }

    /// Tunes a fresh prompt on the examples-proportional mixture of the
    /// given source tasks and the target, for the source budget.
    fn mixture_prompt(
        &self,
        target: &ToyTask,
        tasks: &[String],
        seed: u32,
        which: MixtureCheckpoint,
    ) -> Result<Prompt<f64>, ExperimentError> {
        let mut datasets = BTreeMap::new();
        let mut sizes = Vec::new();
        for name in tasks.iter().map(String::as_str).chain([target.name()]) {
            if datasets.contains_key(name) {
                continue;
            }
            let train = if name == target.name() {
                target.train.clone()
            } else {
                self.task(name)?.train
            };
            sizes.push((name.to_string(), train.len() as u64));
            datasets.insert(name.to_string(), train);
        }
        let spec = mixture_rates::<f64>(&sizes, self.config.mixing_cap)?;
        let schedule = self.source_schedule();
        let draws = schedule.steps as usize * schedule.batch_size;
        let stream = compose_mixture(&spec, &datasets, draws, stream_key(&target.spec, seed))?;
        let mixed = ToyTask {
            spec: TaskSpec {
                name: format!("{}-mixture", target.name()),
                ..target.spec.clone()
            },
            train: stream.map(|(_, ex)| ex.clone()).collect(),
            validation: target.validation.clone(),
        };
        let run = tune(
            &self.model,
            TuningRun::new(mixed, self.vocab_init(), schedule, seed),
        )?;
        let c: &Checkpoint = match which {
            MixtureCheckpoint::Final => run.final_checkpoint()?,
            MixtureCheckpoint::Best => select_best_checkpoint(&run)?,
        };
        Ok(Prompt::new(c.prompt.tokens.clone(), target.name(), seed, 0))
    }

    /// Transfers every library prompt to every target (pairing a prompt's
    /// run seed with the target run seed) next to vocabulary-sampled
    /// baselines. Scores are best-validation accuracy.
    pub fn sweep(&self, library: &Library, targets: &[String]) -> Result<SweepReport, ExperimentError> {
        let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        let mut points = Vec::new();
        let sources = library.load_embeddings::<f64>()?;
        for name in targets {
            let target = self.task(name)?;
            log::info!("sweeping target {name}");
            let embs = self
                .config
                .seeds
                .iter()
                .map(|&s| self.target_embedding(&target, s))
                .collect::<Result<Vec<_>, _>>()?;
            let baselines = self
                .config
                .seeds
                .par_iter()
                .map(|&s| {
                    let run = TuningRun::new(target.clone(), self.vocab_init(), self.target_schedule(), s);
                    Ok(select_best_checkpoint(&tune(&self.model, run)?)?.validation_score)
                })
                .collect::<Result<Vec<f64>, ExperimentError>>()?;
            cells.insert((BASELINE.to_string(), name.clone()), baselines);

            let scores = (0..library.len())
                .into_par_iter()
                .map(|i| {
                    let entry = &library.entries[i];
                    let run = self.tune_target(&target, library.best_prompt(i)?, entry.run_seed)?;
                    Ok(select_best_checkpoint(&run)?.validation_score)
                })
                .collect::<Result<Vec<f64>, ExperimentError>>()?;
            for ((entry, emb), score) in sources.iter().zip(scores) {
                let similarity = cross_run_similarity(&embs, std::slice::from_ref(emb), self.config.metric)?;
                cells
                    .entry((entry.task_name.clone(), name.clone()))
                    .or_default()
                    .push(score);
                points.push(PromptPoint {
                    target: name.clone(),
                    source: entry.task_name.clone(),
                    seed: entry.run_seed,
                    similarity,
                    score,
                });
            }
        }
        Ok(SweepReport {
            table: TransferTable::from_runs(&cells)?,
            points,
        })
    }

    fn families(&self) -> Vec<&str> {
        let mut fams: Vec<&str> = Vec::new();
        for t in &self.config.source_tasks {
            if !fams.contains(&t.family.as_str()) {
                fams.push(&t.family);
            }
        }
        fams
    }

    fn first_source_of(&self, family: &str) -> &TaskSpec {
        self.config
            .source_tasks
            .iter()
            .find(|t| t.family == family)
            .expect("family collected from the source tasks")
    }

    /// Seed set `s` picks the target `s mod |targets|`, the first source
    /// task of the target's family, and run seed `s`. The source prompt is
    /// its best-validation checkpoint; target runs use the target budget.
    pub fn transfer_trial(&self, seed_set: u32) -> Result<TransferTrial, ExperimentError> {
        let targets = &self.config.target_tasks;
        if targets.is_empty() {
            return Err(ExperimentError::Config("no target tasks defined".into()));
        }
        let tspec = &targets[seed_set as usize % targets.len()];
        let sspec = self
            .config
            .source_tasks
            .iter()
            .find(|t| t.family == tspec.family)
            .ok_or_else(|| {
                ExperimentError::Config(format!("no source task in family '{}'", tspec.family))
            })?;
        let source = ToyTask::generate(&self.model, sspec)?;
        let target = ToyTask::generate(&self.model, tspec)?;
        let src_run = tune(
            &self.model,
            TuningRun::new(source, self.vocab_init(), self.source_schedule(), seed_set),
        )?;
        let init = select_best_checkpoint(&src_run)?.prompt.clone();
        let transferred = self.tune_target(&target, init, seed_set)?;
        let baseline = tune(
            &self.model,
            TuningRun::new(target, self.vocab_init(), self.target_schedule(), seed_set),
        )?;
        Ok(TransferTrial {
            source: sspec.name.clone(),
            target: tspec.name.clone(),
            transferred: transferred.final_checkpoint()?.validation_score,
            baseline: baseline.final_checkpoint()?.validation_score,
        })
    }

    /// Seed set `s` compares three runs (seeds `3s..3s+3`) of the first
    /// task of family `s mod F` with three runs of the first task of the
    /// next family. `within` averages the three distinct same-task pairs.
    pub fn clustering_trial(&self, seed_set: u32) -> Result<ClusteringTrial, ExperimentError> {
        let fams = self.families();
        if fams.len() < 2 {
            return Err(ExperimentError::Config("need at least two task families".into()));
        }
        let f = seed_set as usize % fams.len();
        let a = self.first_source_of(fams[f]);
        let b = self.first_source_of(fams[(f + 1) % fams.len()]);
        let embed_step = self.config.schedule.embed_step;
        let embeddings = |spec: &TaskSpec| -> Result<Vec<TaskEmbedding<f64>>, ExperimentError> {
            let task = ToyTask::generate(&self.model, spec)?;
            (0..3)
                .map(|i| self.target_embedding_at(&task, 3 * seed_set + i, embed_step))
                .collect()
        };
        let ea = embeddings(a)?;
        let eb = embeddings(b)?;
        let metric = self.config.metric;
        let mut within = 0.0;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            within += metric.compute(&ea[i], &ea[j])? / 3.0;
        }
        Ok(ClusteringTrial {
            task: a.name.clone(),
            other: b.name.clone(),
            within,
            across: cross_run_similarity(&ea, &eb, metric)?,
        })
    }
}

/// Cross-run similarity between every pair of library tasks, in
/// [`Library::task_names`] order.
pub fn task_similarity(
    library: &Library,
    metric: SimilarityMetric,
) -> Result<(Vec<String>, Matrix<f64>), ExperimentError> {
    let names = library.task_names();
    let embs = library.load_embeddings::<f64>()?;
    let groups: Vec<Vec<TaskEmbedding<f64>>> = names
        .iter()
        .map(|n| {
            embs.iter()
                .filter(|(e, _)| &e.task_name == n)
                .map(|(_, emb)| emb.clone())
                .collect()
        })
        .collect();
    let n = names.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = cross_run_similarity(&groups[i], &groups[j], metric)?;
            data[i * n + j] = s;
            data[j * n + i] = s;
        }
    }
    if n == 0 {
        return Err(RetrievalError::EmptyLibrary.into());
    }
    Ok((names, Matrix::from_vec(n, n, data)?))
}

/// Reads a target embedding checkpoint and checks it against the library.
pub fn read_target_embedding(path: &Path, library: &Library) -> Result<TaskEmbedding<f64>, ExperimentError> {
    let prompt: Prompt<f64> = read_checkpoint(path)?;
    if prompt.step != library.embed_step {
        return Err(ExperimentError::EmbedStep {
            expected: library.embed_step,
            found: prompt.step,
        });
    }
    Ok(TaskEmbedding::new(prompt, library.embed_step).expect("step checked"))
}

/// Loads the config stored in a library directory.
pub fn library_config(dir: &Path) -> Result<ExperimentConfig, ExperimentError> {
    ExperimentConfig::load(&dir.join(CONFIG_FILE))
}

/// Writes the clustered task-similarity heatmap and returns its tree.
pub fn export_task_similarity(
    library: &Library,
    metric: SimilarityMetric,
    path: &Path,
) -> Result<Dendrogram<f64>, ExperimentError> {
    let (ids, sim) = task_similarity(library, metric)?;
    Ok(export_clustered_heatmap(&ids, &sim, path)?)
}
