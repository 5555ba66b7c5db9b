pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod merge;
pub mod model;
pub mod optim;
pub mod report;
pub mod task;
pub mod tensor;
pub mod train;

pub use adapter::{
    trainable_param_count, AdapterBank, AdapterConfig, AdapterMode, AssignmentSnapshot, GroupId,
    MergeEvent, ProjectionType, ShareGroup,
};
pub use autodiff::{Graph, Var};
pub use config::{ModeName, RunConfig, TaskName};
pub use error::{Error, Result};
pub use merge::{
    select_pair, similarity, HookOutcome, MergeEngine, MergeSchedule, PairScope, RunningAverage,
    SimilarityReport,
};
pub use model::{Bound, FrozenBase, Model, ModelConfig, TaskHead};
pub use task::{evaluate, Dataset, Example, Metrics, Target, TaskKind, TaskSpec};
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use tensor::{Scalar, Tensor};
pub use train::{EvalRecord, Phase, RunReport, RunSink, StepOutput, StepRecord, TrainPlan, Trainer};
