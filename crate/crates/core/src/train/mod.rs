//! Optimizer, schedule, pretraining, fine-tuning and grid search.

mod finetune;
mod grid;
mod optim;
mod pretrain;

pub use finetune::{
    finetune, fit_linear_head, head_loss, head_probabilities, task_metrics, FinetuneConfig, Task, TaskExamples, TaskModel,
    HEAD_BIAS, HEAD_WEIGHT,
};
pub use grid::{default_pretrain_space, grid_search, set_dotted, with_overrides, GridResult, GridSpace, Trial};
pub use optim::{cosine_lr, AdamW, AdamWConfig, ParamGroup, ScheduleState, StepReport};
pub use pretrain::{
    batch_objective, feature_mean_row, pretrain, EpochLog, MaskedPair, ModelShape, ObjectiveSettings, PreparedStays,
    PretrainConfig, PretrainData, PretrainOptions, PretrainOutcome, TrainState,
};
