//! Ranking source prompts against a target task embedding, and the three
//! ways of exploiting the ranking: best of top-k, top-k weighted average,
//! and a top-k multi-task mixture.

mod mixture;

pub use mixture::{compose_mixture, mixture_rates, MixtureComponent, MixtureSpec, MixtureStream, DEFAULT_MIXING_CAP};

use std::cmp::Ordering;

use thiserror::Error;

use crate::library::{Library, LibraryEntry, LibraryError};
use crate::prompt::{check_shape, Matrix, Prompt, PromptError, SimilarityMetric, TaskEmbedding};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("library is empty")]
    EmptyLibrary,
    #[error("k = {k} out of range 1..={available}")]
    KOutOfRange { k: usize, available: usize },
    #[error("no prompts to average")]
    EmptyList,
    #[error("no sizes given")]
    EmptySizes,
    #[error("dataset '{id}' has size 0")]
    ZeroSize { id: String },
    #[error("mixing cap must be at least 1")]
    ZeroCap,
    #[error("no example stream for dataset '{0}'")]
    MissingDataset(String),
    #[error("example stream for dataset '{0}' is empty")]
    EmptyDataset(String),
    #[error("total_examples must be at least 1")]
    NoDraws,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Library(#[from] LibraryError),
}

/// A library entry scored against a target; `rank` starts at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSource<T> {
    pub rank: usize,
    pub entry: LibraryEntry,
    pub similarity: T,
}

/// Scores every source against `target` and sorts by descending
/// similarity. Ties go to the lexicographically smaller
/// `(task_name, run_seed)`.
pub fn rank_sources<T: Scalar>(
    target: &TaskEmbedding<T>,
    sources: &[(LibraryEntry, TaskEmbedding<T>)],
    metric: SimilarityMetric,
) -> Result<Vec<RankedSource<T>>, RetrievalError> {
    if sources.is_empty() {
        return Err(RetrievalError::EmptyLibrary);
    }
    let mut scored = sources
        .iter()
        .map(|(entry, emb)| Ok((entry, metric.compute(target, emb)?)))
        .collect::<Result<Vec<_>, PromptError>>()?;
    scored.sort_by(|(ea, sa), (eb, sb)| {
        sb.partial_cmp(sa)
            .unwrap_or(Ordering::Equal)
            .then_with(|| (&ea.task_name, ea.run_seed).cmp(&(&eb.task_name, eb.run_seed)))
    });
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (entry, similarity))| RankedSource {
            rank: i + 1,
            entry: entry.clone(),
            similarity,
        })
        .collect())
}

/// Loads the library's embeddings and ranks them against `target`.
pub fn rank_library<T: Scalar>(
    target: &TaskEmbedding<T>,
    library: &Library,
    metric: SimilarityMetric,
) -> Result<Vec<RankedSource<T>>, RetrievalError> {
    if library.is_empty() {
        return Err(RetrievalError::EmptyLibrary);
    }
    check_shape(target.shape(), library.shape())?;
    rank_sources(target, &library.load_embeddings()?, metric)
}

/// The first `k` ranked sources: one target tuning run per candidate.
pub fn best_of_top_k_plan<T>(
    ranked: &[RankedSource<T>],
    k: usize,
) -> Result<&[RankedSource<T>], RetrievalError> {
    if k == 0 || k > ranked.len() {
        return Err(RetrievalError::KOutOfRange {
            k,
            available: ranked.len(),
        });
    }
    Ok(&ranked[..k])
}

/// Picks the candidate whose outcome scored best; ties keep the earlier
/// (better-ranked) candidate. Returns `None` for an empty slice.
pub fn select_best<C, T: Scalar>(outcomes: &[(C, T)]) -> Option<&(C, T)> {
    outcomes.iter().fold(None, |best: Option<&(C, T)>, cur| match best {
        Some(b) if b.1 >= cur.1 => Some(b),
        _ => Some(cur),
    })
}

/// Normalized mixing weights for the weighted average.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaWeights<T> {
    pub weights: Vec<T>,
    /// Every similarity floored to zero, so weights are uniform.
    pub uniform_fallback: bool,
}

/// `α_r = max(sim_r, 0) / Σ_l max(sim_l, 0)`, falling back to uniform
/// weights (with a logged warning) when every similarity is non-positive.
pub fn alpha_weights<T: Scalar>(similarities: &[T]) -> Result<AlphaWeights<T>, RetrievalError> {
    if similarities.is_empty() {
        return Err(RetrievalError::EmptyList);
    }
    let floored: Vec<T> = similarities.iter().map(|&s| s.max(T::zero())).collect();
    let total: T = floored.iter().copied().sum();
    if total > T::zero() {
        return Ok(AlphaWeights {
            weights: floored.into_iter().map(|s| s / total).collect(),
            uniform_fallback: false,
        });
    }
    log::warn!(
        "all {} similarities are non-positive; using uniform weights",
        similarities.len()
    );
    let n = T::of_usize(similarities.len());
    Ok(AlphaWeights {
        weights: vec![T::one() / n; similarities.len()],
        uniform_fallback: true,
    })
}

/// `Σ_r α_r ρ_r` over the given `(prompt, similarity)` pairs.
pub fn weighted_average_prompt<T: Scalar>(
    top: &[(Prompt<T>, T)],
) -> Result<Prompt<T>, RetrievalError> {
    let first = top.first().ok_or(RetrievalError::EmptyList)?;
    let shape = first.0.shape();
    for (p, _) in &top[1..] {
        check_shape(shape, p.shape())?;
    }
    let sims: Vec<T> = top.iter().map(|(_, s)| *s).collect();
    let alpha = alpha_weights(&sims)?;
    let mut acc = Matrix::zeros(shape.0, shape.1)?;
    for ((p, _), &w) in top.iter().zip(&alpha.weights) {
        acc.add_scaled(&p.tokens, w)?;
    }
    Ok(Prompt::new(acc, "weighted-average", 0, 0))
}

/// Distinct task names among the first `k` ranked sources, in rank order.
pub fn top_k_tasks<T>(ranked: &[RankedSource<T>], k: usize) -> Result<Vec<String>, RetrievalError> {
    let plan = best_of_top_k_plan(ranked, k)?;
    let mut tasks: Vec<String> = Vec::new();
    for r in plan {
        if !tasks.contains(&r.entry.task_name) {
            tasks.push(r.entry.task_name.clone());
        }
    }
    Ok(tasks)
}
