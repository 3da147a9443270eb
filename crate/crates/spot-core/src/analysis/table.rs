use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::heatmap::Heatmap;
use super::stats::{aggregate_runs, relative_error_reduction};
use super::AnalysisError;
use crate::scalar::Scalar;

/// Row id of the no-transfer baseline.
pub const BASELINE: &str = "BASELINE";

/// Published source × target transfer results (mean and std over three
/// seeds per cell), with the from-scratch baseline as the `BASELINE` row.
pub const PAPER_TRANSFER_TABLE_CSV: &str = include_str!("../../data/paper_transfer_table.csv");

/// Mean target scores per (source, target) cell. `sources` includes the
/// `BASELINE` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferTable<T> {
    pub targets: Vec<String>,
    pub sources: Vec<String>,
    /// `scores[source][target]`
    pub scores: Vec<Vec<T>>,
    pub stds: Vec<Vec<T>>,
    pub runs_per_cell: usize,
}

impl<T: Scalar> TransferTable<T> {
    /// The embedded fixture of published results.
    pub fn paper_fixture() -> Self {
        Self::from_csv_str(PAPER_TRANSFER_TABLE_CSV).expect("embedded fixture is valid")
    }

    /// Parses the long CSV form `source,target,mean,std,runs`, one line per
    /// cell. Every (source, target) pair must appear exactly once.
    pub fn from_csv_str(text: &str) -> Result<Self, AnalysisError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| AnalysisError::Csv(e.to_string()))?
            .clone();
        let expected = ["source", "target", "mean", "std", "runs"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(AnalysisError::Table(format!(
                "header must be {}, found {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut cells = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| AnalysisError::Csv(e.to_string()))?;
            let line = i + 2;
            let num = |j: usize| -> Result<f64, AnalysisError> {
                rec[j].parse::<f64>().map_err(|_| {
                    AnalysisError::Table(format!("line {line}: bad number '{}'", &rec[j]))
                })
            };
            let runs = rec[4].parse::<usize>().map_err(|_| {
                AnalysisError::Table(format!("line {line}: bad run count '{}'", &rec[4]))
            })?;
            cells.push((rec[0].to_string(), rec[1].to_string(), num(2)?, num(3)?, runs));
        }
        Self::assemble(cells)
    }

    fn assemble(cells: Vec<(String, String, f64, f64, usize)>) -> Result<Self, AnalysisError> {
        let mut sources: Vec<String> = Vec::new();
        let mut targets: Vec<String> = Vec::new();
        for (s, t, ..) in &cells {
            if !sources.contains(s) {
                sources.push(s.clone());
            }
            if !targets.contains(t) {
                targets.push(t.clone());
            }
        }
        if !sources.iter().any(|s| s == BASELINE) {
            return Err(AnalysisError::Table(format!("missing {BASELINE} row")));
        }
        let runs_per_cell = cells.first().map_or(0, |c| c.4);
        if runs_per_cell == 0 {
            return Err(AnalysisError::Table("runs per cell must be positive".into()));
        }
        let mut grid: HashMap<(usize, usize), (f64, f64)> = HashMap::new();
        for (s, t, mean, std, runs) in cells {
            if runs != runs_per_cell {
                return Err(AnalysisError::Table(format!(
                    "({s}, {t}) has {runs} runs, table uses {runs_per_cell}"
                )));
            }
            if !(mean.is_finite() && (0.0..=100.0).contains(&mean)) {
                return Err(AnalysisError::ScoreOutOfRange(mean));
            }
            if !(std.is_finite() && std >= 0.0) {
                return Err(AnalysisError::Table(format!("({s}, {t}): bad std {std}")));
            }
            let key = (
                sources.iter().position(|x| *x == s).expect("collected"),
                targets.iter().position(|x| *x == t).expect("collected"),
            );
            if grid.insert(key, (mean, std)).is_some() {
                return Err(AnalysisError::Table(format!("duplicate cell ({s}, {t})")));
            }
        }
        let mut scores = vec![vec![T::zero(); targets.len()]; sources.len()];
        let mut stds = scores.clone();
        for (si, s) in sources.iter().enumerate() {
            for (ti, t) in targets.iter().enumerate() {
                let (m, sd) = grid
                    .get(&(si, ti))
                    .ok_or_else(|| AnalysisError::Table(format!("missing cell ({s}, {t})")))?;
                scores[si][ti] = T::of(*m);
                stds[si][ti] = T::of(*sd);
            }
        }
        Ok(Self {
            targets,
            sources,
            scores,
            stds,
            runs_per_cell,
        })
    }

    /// Builds a table from per-run scores, aggregating each cell with
    /// [`aggregate_runs`]. Every cell needs the same number of runs.
    pub fn from_runs(runs: &BTreeMap<(String, String), Vec<T>>) -> Result<Self, AnalysisError> {
        let mut cells = Vec::with_capacity(runs.len());
        for ((s, t), scores) in runs {
            let (mean, std) = aggregate_runs(scores)?;
            cells.push((s.clone(), t.clone(), mean.widen(), std.widen(), scores.len()));
        }
        // baseline first, then sources in key order
        cells.sort_by_key(|c| c.0 != BASELINE);
        Self::assemble(cells)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("source,target,mean,std,runs\n");
        for (si, s) in self.sources.iter().enumerate() {
            for (ti, t) in self.targets.iter().enumerate() {
                out.push_str(&format!(
                    "{s},{t},{},{},{}\n",
                    self.scores[si][ti], self.stds[si][ti], self.runs_per_cell
                ));
            }
        }
        out
    }

    pub fn baseline_row(&self) -> usize {
        self.sources
            .iter()
            .position(|s| s == BASELINE)
            .expect("validated on construction")
    }

    pub fn baseline_scores(&self) -> &[T] {
        &self.scores[self.baseline_row()]
    }

    /// Indices of the non-baseline source rows.
    pub fn source_rows(&self) -> impl Iterator<Item = usize> + '_ {
        let b = self.baseline_row();
        (0..self.sources.len()).filter(move |&i| i != b)
    }

    pub fn score(&self, source: &str, target: &str) -> Option<T> {
        let si = self.sources.iter().position(|s| s == source)?;
        let ti = self.targets.iter().position(|t| t == target)?;
        Some(self.scores[si][ti])
    }

    /// Relative error reduction of one transfer against the baseline.
    pub fn rer(&self, source: &str, target: &str) -> Result<T, AnalysisError> {
        let missing = || AnalysisError::Table(format!("no cell ({source}, {target})"));
        let s = self.score(source, target).ok_or_else(missing)?;
        let b = self.score(BASELINE, target).ok_or_else(missing)?;
        relative_error_reduction(b, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleChoice<T> {
    pub target: String,
    pub source: String,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport<T> {
    pub choices: Vec<OracleChoice<T>>,
    /// Mean over targets of the best source score.
    pub average: T,
    pub baseline_average: T,
}

/// Brute-force best source per target. Ties go to the lexicographically
/// smallest source id.
pub fn oracle_search<T: Scalar>(table: &TransferTable<T>) -> OracleReport<T> {
    let mut choices = Vec::with_capacity(table.targets.len());
    for (ti, target) in table.targets.iter().enumerate() {
        let mut best: Option<(usize, T)> = None;
        for si in table.source_rows() {
            let s = table.scores[si][ti];
            best = match best {
                Some((bi, bs))
                    if bs > s || (bs == s && table.sources[bi] <= table.sources[si]) =>
                {
                    Some((bi, bs))
                }
                _ => Some((si, s)),
            };
        }
        // a table with only the baseline row falls back to it
        let (si, score) = best.unwrap_or((table.baseline_row(), table.baseline_scores()[ti]));
        choices.push(OracleChoice {
            target: target.clone(),
            source: table.sources[si].clone(),
            score,
        });
    }
    let n = T::of_usize(table.targets.len().max(1));
    let average = choices.iter().map(|c| c.score).sum::<T>() / n;
    let baseline_average = table.baseline_scores().iter().copied().sum::<T>() / n;
    OracleReport {
        choices,
        average,
        baseline_average,
    }
}

/// Relative error reduction of every source (rows) on every target
/// (columns), baseline row excluded.
pub fn rer_matrix<T: Scalar>(table: &TransferTable<T>) -> Result<Heatmap<T>, AnalysisError> {
    let base = table.baseline_scores();
    let mut values = Vec::new();
    let mut row_ids = Vec::new();
    for si in table.source_rows() {
        row_ids.push(table.sources[si].clone());
        values.push(
            table.scores[si]
                .iter()
                .zip(base)
                .map(|(&s, &b)| relative_error_reduction(b, s))
                .collect::<Result<Vec<T>, _>>()?,
        );
    }
    Ok(Heatmap {
        row_ids,
        col_ids: table.targets.clone(),
        values,
    })
}
