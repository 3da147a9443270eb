//! Transferability statistics: relative error reduction, seed
//! aggregation, oracle search, Pearson correlation, hierarchical
//! clustering and heatmap export.

mod cluster;
mod heatmap;
mod stats;
mod table;

pub use cluster::{cluster_order, Dendrogram, Merge};
pub use heatmap::{export_clustered_heatmap, export_heatmap, format_sig, read_heatmap, Heatmap};
pub use stats::{aggregate_runs, correlation_report, pearson, relative_error_reduction, CorrelationReport};
pub use table::{oracle_search, rer_matrix, OracleChoice, OracleReport, TransferTable, BASELINE, PAPER_TRANSFER_TABLE_CSV};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("baseline score is 100; relative error reduction is undefined")]
    BaselinePerfect,
    #[error("score {0} outside [0, 100]")]
    ScoreOutOfRange(f64),
    #[error("list is empty")]
    EmptyList,
    #[error("lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("zero variance in {0}")]
    DegenerateVariance(&'static str),
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric at ({row}, {col}): {a} vs {b}")]
    AsymmetricInput { row: usize, col: usize, a: f64, b: f64 },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("transfer table: {0}")]
    Table(String),
    #[error("I/O error on {path}: {message}")]
    Io { path: std::path::PathBuf, message: String },
    #[error("CSV error: {0}")]
    Csv(String),
}
