use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::task::Example;
use super::TunerError;
use crate::prompt::{Matrix, Prompt};

fn default_head_scale() -> f64 {
    1.25
}

fn default_bias_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub class_count: usize,
    pub seed: u64,
    /// Standard deviation of the classifier head entries.
    #[serde(default = "default_head_scale")]
    pub head_scale: f64,
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            embed_dim: 16,
            class_count: 4,
            seed: 0,
            head_scale: default_head_scale(),
            bias_scale: default_bias_scale(),
        }
    }
}

/// Mean-pooling classifier over a frozen token table.
///
/// `h = mean([prompt rows; token rows of input])`, `logits = W h + b`.
/// Nothing here is ever updated; tuning only touches the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenToyModel {
    token_table: Matrix<f64>,
    head_weights: Matrix<f64>,
    head_bias: Vec<f64>,
    seed: u64,
}

impl FrozenToyModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self, TunerError> {
        if cfg.vocab_size == 0 || cfg.embed_dim == 0 || cfg.class_count == 0 {
            return Err(TunerError::InvalidConfig(format!(
                "model dimensions must be positive (V={}, E={}, C={})",
                cfg.vocab_size, cfg.embed_dim, cfg.class_count
            )));
        }
        let normal = |sd: f64| {
            Normal::new(0.0, sd).map_err(|e| TunerError::InvalidConfig(format!("scale {sd}: {e}")))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let unit = normal(1.0)?;
        let table: Vec<f64> = (0..cfg.vocab_size * cfg.embed_dim)
            .map(|_| unit.sample(&mut rng))
            .collect();
        let head = normal(cfg.head_scale)?;
        let weights: Vec<f64> = (0..cfg.class_count * cfg.embed_dim)
            .map(|_| head.sample(&mut rng))
            .collect();
        let bias_dist = normal(cfg.bias_scale)?;
        let bias = (0..cfg.class_count).map(|_| bias_dist.sample(&mut rng)).collect();
        Self::from_parts(
            Matrix::from_vec(cfg.vocab_size, cfg.embed_dim, table)?,
            Matrix::from_vec(cfg.class_count, cfg.embed_dim, weights)?,
            bias,
            cfg.seed,
        )
    }

    pub fn from_parts(
        token_table: Matrix<f64>,
        head_weights: Matrix<f64>,
        head_bias: Vec<f64>,
        seed: u64,
    ) -> Result<Self, TunerError> {
        if token_table.cols() != head_weights.cols() {
            return Err(TunerError::InvalidConfig(format!(
                "token table width {} != head width {}",
                token_table.cols(),
                head_weights.cols()
            )));
        }
        if head_bias.len() != head_weights.rows() || head_bias.iter().any(|b| !b.is_finite()) {
            return Err(TunerError::InvalidConfig(format!(
                "head bias must be {} finite values",
                head_weights.rows()
            )));
        }
        Ok(Self {
            token_table,
            head_weights,
            head_bias,
            seed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_table.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.token_table.cols()
    }

    pub fn class_count(&self) -> usize {
        self.head_weights.rows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_table(&self) -> &Matrix<f64> {
        &self.token_table
    }

    pub fn head_weights(&self) -> &Matrix<f64> {
        &self.head_weights
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.head_bias
    }

    /// SHA-256 over shapes, seed and the bit patterns of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for dim in [
            self.vocab_size(),
            self.embed_dim(),
            self.class_count(),
        ] {
            h.update((dim as u64).to_le_bytes());
        }
        h.update(self.seed.to_le_bytes());
        let params = self
            .token_table
            .as_slice()
            .iter()
            .chain(self.head_weights.as_slice())
            .chain(&self.head_bias);
        for v in params {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Class scores `W x` (no bias) for a single token.
    pub fn token_scores(&self, token: usize) -> Vec<f64> {
        let x = self.token_table.row(token);
        self.head_weights
            .iter_rows()
            .map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn check_input(&self, prompt: &Prompt<f64>, input: &[u32]) -> Result<(), TunerError> {
        if input.is_empty() {
            return Err(TunerError::EmptyInput);
        }
        if prompt.width() != self.embed_dim() {
            return Err(TunerError::PromptWidth {
                expected: self.embed_dim(),
                found: prompt.width(),
            });
        }
        if let Some(&bad) = input.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(TunerError::TokenIdOutOfRange {
                id: bad,
                vocab_size: self.vocab_size(),
            });
        }
        Ok(())
    }

    /// Mean of the prompt rows and the input's token rows.
    fn pooled(&self, prompt: &Prompt<f64>, input: &[u32]) -> Vec<f64> {
        let mut h = vec![0.0; self.embed_dim()];
        let rows = prompt
            .tokens
            .iter_rows()
            .chain(input.iter().map(|&t| self.token_table.row(t as usize)));
        for row in rows {
            for (a, v) in h.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = (prompt.len() + input.len()) as f64;
        h.iter_mut().for_each(|a| *a /= n);
        h
    }

    pub fn logits(&self, prompt: &Prompt<f64>, input: &[u32]) -> Result<Vec<f64>, TunerError> {
        self.check_input(prompt, input)?;
        let h = self.pooled(prompt, input);
        Ok(self
            .head_weights
            .iter_rows()
            .zip(&self.head_bias)
            .map(|(w, b)| w.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect())
    }

    /// Class probabilities `softmax(W h + b)`.
    pub fn forward(&self, prompt: &Prompt<f64>, input: &[u32]) -> Result<Vec<f64>, TunerError> {
        Ok(softmax(&self.logits(prompt, input)?))
    }

    /// Mean cross-entropy over the batch.
    pub fn batch_loss(&self, prompt: &Prompt<f64>, batch: &[Example]) -> Result<f64, TunerError> {
        if batch.is_empty() {
            return Err(TunerError::EmptyBatch);
        }
        let mut total = 0.0;
        for ex in batch {
            let label = self.check_label(ex.label)?;
            let logits = self.logits(prompt, &ex.tokens)?;
            total += log_sum_exp(&logits) - logits[label];
        }
        Ok(total / batch.len() as f64)
    }

    fn check_label(&self, label: u32) -> Result<usize, TunerError> {
        let l = label as usize;
        if l >= self.class_count() {
            return Err(TunerError::LabelOutOfRange {
                label,
                class_count: self.class_count(),
            });
        }
        Ok(l)
    }

    /// Gradient of [`batch_loss`](Self::batch_loss) with respect to the
    /// prompt entries. Each example contributes `Wᵀ(p − y) / (L + n)` to
    /// every prompt row.
    pub fn prompt_gradient(
        &self,
        prompt: &Prompt<f64>,
        batch: &[Example],
    ) -> Result<Matrix<f64>, TunerError> {
        if batch.is_empty() {
            return Err(TunerError::EmptyBatch);
        }
        let e = self.embed_dim();
        let mut row_grad = vec![0.0; e];
        for ex in batch {
            let label = self.check_label(ex.label)?;
            let mut residual = self.forward(prompt, &ex.tokens)?;
            residual[label] -= 1.0;
            let scale = 1.0 / (prompt.len() + ex.tokens.len()) as f64;
            for (w, r) in self.head_weights.iter_rows().zip(&residual) {
                for (g, wj) in row_grad.iter_mut().zip(w) {
                    *g += scale * r * wj;
                }
            }
        }
        let n = batch.len() as f64;
        row_grad.iter_mut().for_each(|g| *g /= n);
        let data = row_grad.repeat(prompt.len());
        Ok(Matrix::from_vec(prompt.len(), e, data)?)
    }

    /// Index of the most probable class; ties go to the lowest index.
    pub fn predict(&self, prompt: &Prompt<f64>, input: &[u32]) -> Result<usize, TunerError> {
        Ok(argmax(&self.logits(prompt, input)?))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / z).collect()
}
