//! Dense prompt matrices and the two task-similarity metrics.
//!
//! A prompt is an `L × E` matrix: `L` soft tokens, each an `E`-wide
//! embedding. A task embedding is the same matrix captured at a fixed,
//! library-wide training step. Both metrics reduce over rows in ascending
//! index order so results are reproducible bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{clamp_unit, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("invalid prompt shape {rows}x{cols}: both dimensions must be at least 1")]
    InvalidShape { rows: usize, cols: usize },
    #[error("matrix data has {found} values, expected {expected}")]
    DataLength { expected: usize, found: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("vector lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("zero-norm {what}")]
    ZeroNorm { what: ZeroNormSite },
    #[error("run list is empty")]
    EmptyRunList,
}

/// Where a zero-norm vector was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroNormSite {
    /// Argument 0 or 1 of a plain cosine.
    Vector(usize),
    /// Pooled vector of embedding 0 or 1.
    Pooled(usize),
    /// A row of embedding 0 or 1.
    Row { embedding: usize, row: usize },
}

impl std::fmt::Display for ZeroNormSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Vector(i) => write!(f, "vector (argument {i})"),
            Self::Pooled(i) => write!(f, "mean-pooled vector of embedding {i}"),
            Self::Row { embedding, row } => write!(f, "row {row} of embedding {embedding}"),
        }
    }
}

/// Row-major `rows × cols` matrix of finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, PromptError> {
        if rows == 0 || cols == 0 {
            return Err(PromptError::InvalidShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(PromptError::DataLength {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(PromptError::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, PromptError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(PromptError::DataLength {
                expected: cols,
                found: bad.len(),
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self, PromptError> {
        Self::from_vec(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    /// Applies `f` to every entry; fails if the result is not finite.
    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Result<Matrix<U>, PromptError> {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// In-place `self += scale * other`. Shapes must match.
    pub fn add_scaled(&mut self, other: &Matrix<T>, scale: T) -> Result<(), PromptError> {
        check_shape(self.shape(), other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(PromptError::NonFinite {
                row: pos / self.cols,
                col: pos % self.cols,
            });
        }
        Ok(())
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

pub(crate) fn check_shape(left: (usize, usize), right: (usize, usize)) -> Result<(), PromptError> {
    if left == right {
        Ok(())
    } else {
        Err(PromptError::ShapeMismatch { left, right })
    }
}

/// A soft prompt: `L × E` tunable token embeddings plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt<T> {
    pub tokens: Matrix<T>,
    pub task_name: String,
    pub run_seed: u32,
    /// Training steps completed when this snapshot was taken.
    pub step: u64,
}

impl<T: Scalar> Prompt<T> {
    pub fn new(tokens: Matrix<T>, task_name: impl Into<String>, run_seed: u32, step: u64) -> Self {
        Self {
            tokens,
            task_name: task_name.into(),
            run_seed,
            step,
        }
    }

    /// Prompt length `L`.
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    /// Always false; prompts have at least one token.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Embedding width `E`.
    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tokens.shape()
    }
}

/// A prompt snapshot taken at the library's fixed embedding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding<T> {
    pub prompt: Prompt<T>,
    pub embed_step: u64,
}

impl<T: Scalar> TaskEmbedding<T> {
    /// Tags `prompt` as a task embedding. The prompt's `step` must equal
    /// `embed_step`.
    pub fn new(prompt: Prompt<T>, embed_step: u64) -> Result<Self, EmbedStepMismatch> {
        if prompt.step != embed_step {
            return Err(EmbedStepMismatch {
                expected: embed_step,
                found: prompt.step,
            });
        }
        Ok(Self { prompt, embed_step })
    }

    pub fn tokens(&self) -> &Matrix<T> {
        &self.prompt.tokens
    }

    pub fn shape(&self) -> (usize, usize) {
        self.prompt.shape()
    }

    pub fn task_name(&self) -> &str {
        &self.prompt.task_name
    }

    pub fn run_seed(&self) -> u32 {
        self.prompt.run_seed
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("embedding captured at step {found}, expected embed step {expected}")]
pub struct EmbedStepMismatch {
    pub expected: u64,
    pub found: u64,
}

/// Which task-similarity metric to compute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMetric {
    /// Cosine of the mean-pooled prompt tokens.
    #[default]
    #[serde(alias = "avg")]
    AvgTokens,
    /// Mean cosine over every token pair.
    PerToken,
}

impl SimilarityMetric {
    pub fn compute<T: Scalar>(
        self,
        a: &TaskEmbedding<T>,
        b: &TaskEmbedding<T>,
    ) -> Result<T, PromptError> {
        match self {
            Self::AvgTokens => sim_avg_tokens(a, b),
            Self::PerToken => sim_per_token(a, b),
        }
    }
}

impl std::str::FromStr for SimilarityMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg" | "avg-tokens" => Ok(Self::AvgTokens),
            "per-token" => Ok(Self::PerToken),
            other => Err(format!("unknown metric '{other}' (expected avg or per-token)")),
        }
    }
}

impl std::fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AvgTokens => "avg",
            Self::PerToken => "per-token",
        })
    }
}

/// Column means of a matrix: `out[j] = (1/L) Σ_i m[i][j]`.
pub fn mean_pool<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let mut acc = vec![T::zero(); m.cols()];
    for row in m.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    let n = T::of_usize(m.rows());
    acc.into_iter().map(|s| s / n).collect()
}

fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

fn norm<T: Scalar>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<T, PromptError> {
    if u.len() != v.len() {
        return Err(PromptError::LengthMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let nu = norm(u);
    if nu == T::zero() {
        return Err(PromptError::ZeroNorm {
            what: ZeroNormSite::Vector(0),
        });
    }
    let nv = norm(v);
    if nv == T::zero() {
        return Err(PromptError::ZeroNorm {
            what: ZeroNormSite::Vector(1),
        });
    }
    Ok(clamp_unit(dot(u, v) / (nu * nv)))
}

/// Cosine similarity of the average tokens of two embeddings.
pub fn sim_avg_tokens<T: Scalar>(
    a: &TaskEmbedding<T>,
    b: &TaskEmbedding<T>,
) -> Result<T, PromptError> {
    check_shape(a.shape(), b.shape())?;
    let pa = mean_pool(a.tokens());
    let pb = mean_pool(b.tokens());
    cosine(&pa, &pb).map_err(|e| match e {
        PromptError::ZeroNorm {
            what: ZeroNormSite::Vector(i),
        } => PromptError::ZeroNorm {
            what: ZeroNormSite::Pooled(i),
        },
        other => other,
    })
}

/// Mean cosine similarity over all `L²` token pairs.
///
/// Unlike [`sim_avg_tokens`] this is generally below 1 for `a == b`
/// because cross-row pairs are included.
pub fn sim_per_token<T: Scalar>(
    a: &TaskEmbedding<T>,
    b: &TaskEmbedding<T>,
) -> Result<T, PromptError> {
    check_shape(a.shape(), b.shape())?;
    let row_norms = |m: &Matrix<T>, embedding: usize| -> Result<Vec<T>, PromptError> {
        m.iter_rows()
            .enumerate()
            .map(|(row, r)| {
                let n = norm(r);
                if n == T::zero() {
                    Err(PromptError::ZeroNorm {
                        what: ZeroNormSite::Row { embedding, row },
                    })
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let na = row_norms(a.tokens(), 0)?;
    let nb = row_norms(b.tokens(), 1)?;
    let mut total = T::zero();
    for (ra, &la) in a.tokens().iter_rows().zip(&na) {
        for (rb, &lb) in b.tokens().iter_rows().zip(&nb) {
            total = total + clamp_unit(dot(ra, rb) / (la * lb));
        }
    }
    let l = T::of_usize(a.tokens().rows());
    Ok(clamp_unit(total / (l * l)))
}

/// Mean of `metric` over every ordered `(runs_a[i], runs_b[j])` pair.
pub fn cross_run_similarity<T: Scalar>(
    runs_a: &[TaskEmbedding<T>],
    runs_b: &[TaskEmbedding<T>],
    metric: SimilarityMetric,
) -> Result<T, PromptError> {
    if runs_a.is_empty() || runs_b.is_empty() {
        return Err(PromptError::EmptyRunList);
    }
    let mut total = T::zero();
    for a in runs_a {
        for b in runs_b {
            total = total + metric.compute(a, b)?;
        }
    }
    Ok(total / T::of_usize(runs_a.len() * runs_b.len()))
}
