//! Evaluation protocols: splits, training with early stopping, detection
//! metrics, ROC analysis and the image-size ablation.

mod metrics;
mod protocol;
mod records;
mod roc;
mod split;
mod train;

pub use metrics::{Confusion, MetricSummary, MetricsReport, MetricsSummary, DEFAULT_THRESHOLD, METRIC_NAMES};
pub use protocol::{
    ablation_architecture, dataset_at_width, resize_ablation, run_holdout_protocol, run_plan, run_plans, AblationOptions,
    AblationRow, AblationTable, ProtocolResult, RunLine, RunResult,
};
pub use records::{validate_records, Dataset, Label, Sample, SampleRecord};
pub use roc::{roc_curve, write_points, RocCurve};
pub use split::{
    holdout_split, make_augmented_split, make_holdout_splits, make_temporal_split, AugmentOptions, ObfuscatedTest,
    SplitMode, SplitPlan, SplitRatios, MIN_HOLDOUT_SAMPLES,
};
pub use train::{batch_gradients, evaluate, labels_of, score, train, write_history, EpochRecord, TrainConfig, TrainOutcome};

use thiserror::Error;

use crate::image::ImageError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {needed} records, found {found}")]
    TooFewSamples { found: usize, needed: usize },
    #[error("temporal split needs records on both sides of the cutoff ({before} before, {after} after)")]
    EmptySide { before: usize, after: usize },
    #[error("record {id} names base {base:?}, which is not in the manifest")]
    MissingLinkage { id: String, base: String },
    #[error("obfuscated record {0} has a different label from its base")]
    LabelMismatch(String),
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("no sample with id {0}")]
    MissingSample(String),
    #[error("ROC analysis needs both classes")]
    OneClassOnly,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("{0} set is empty")]
    EmptyPartition(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("epoch {epoch}: {source}")]
    Training { epoch: usize, source: NnError },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub type Result<T> = std::result::Result<T, EvalError>;
