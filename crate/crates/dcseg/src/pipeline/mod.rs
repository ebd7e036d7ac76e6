//! Orchestration: configuration, data loading, the two-phase training
//! loop, sliding-window inference, evaluation, overlays, checkpoints.

mod checkpoint;
mod config;
mod data;
mod evaluate;
mod infer;
mod optim;
mod overlay;
mod train;
mod verify;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, BestRecord, Checkpoint, RngState, TrainCounters,
};
pub use config::{
    BatchConfig, ConsistencyConfig, CountsToml, DataConfig, PhantomConfigToml, Precision,
    RunConfig, ScheduleConfig, TrainingVariant, TransformPoolConfig,
};
pub use data::{sample_labeled_patch, sample_unlabeled_patch, Dataset, LoadedCase};
pub use evaluate::{
    aggregate_cases, aggregate_seeds, evaluate_split, format_eval_report, CaseEval, EvalAggregate,
    MeanStd, SeedAggregate,
};
pub use infer::{infer, infer_with_uncertainty, UncertaintyInference};
pub use optim::{Adam, AdamConfig, AdamState};
pub use overlay::{emit_overlays, slice_contour, GT_COLOR, PRED_COLOR};
pub use train::{
    build_finetune_loss, collect_gradients, network_from_checkpoint, resume, train, FinetuneBatch,
    FinetuneSettings, FrozenPerturbation, FrozenStep, StepMode, TrainOutcome,
};
pub use verify::{check_supervised_loss_gradients, check_total_loss_gradients};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("overlay error: {0}")]
    Overlay(String),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Loss(#[from] crate::loss::LossError),
    #[error(transparent)]
    Uncertainty(#[from] crate::uncertainty::UncertaintyError),
    #[error(transparent)]
    Perturb(#[from] crate::perturb::PerturbError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Transform(#[from] crate::transform::TransformError),
}
