//! Post-hoc out-of-distribution detection: per-sample detection scores,
//! Gaussian-mixture ensembles over score vectors, and AUROC evaluation under
//! distribution-shift and error-detection settings.

pub mod ensemble;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod matrix;
pub mod npy;
pub mod numeric;
pub mod scores;
pub mod stats;
pub mod synth;

pub use ensemble::{EnsembleDefinition, EnsembleModel, GmmModel, GmmOptions};
pub use error::{Error, ErrorKind, Result};
pub use eval::{auroc, EvalReport, ReportFormat, Scorer, Setting, TaskResult};
pub use ingest::{DatasetBundle, DatasetManifest, ModelHead, SampleRecord, ShiftType};
pub use matrix::RowMatrix;
pub use scores::{ScoreKind, ScoreParams};
pub use stats::{FittedStats, StatsConfig};
