//! Soft prompt transfer: a library of tuned soft prompts, task-similarity
//! retrieval over their embeddings, a toy frozen-model tuner, and the
//! analysis routines that measure how well prompts transfer.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, the precision used everywhere outside
//! the checkpoint payload.

pub mod analysis;
pub mod checkpoint;
pub mod experiment;
pub mod library;
pub mod prompt;
pub mod retrieval;
pub mod scalar;
pub mod tuner;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use experiment::{Experiment, ExperimentConfig, ExperimentError, TransferMethod};
pub use library::{load_library, open_library, Library, LibraryEntry, LibraryError};
pub use prompt::{cross_run_similarity, PromptError, SimilarityMetric};
pub use retrieval::RetrievalError;
pub use scalar::Scalar;
pub use tuner::TunerError;

pub type Matrix = prompt::Matrix<f64>;
pub type Prompt = prompt::Prompt<f64>;
pub type PromptF32 = prompt::Prompt<f32>;
pub type TaskEmbedding = prompt::TaskEmbedding<f64>;
pub type RankedSource = retrieval::RankedSource<f64>;
pub type TransferTable = analysis::TransferTable<f64>;
pub type Heatmap = analysis::Heatmap<f64>;
