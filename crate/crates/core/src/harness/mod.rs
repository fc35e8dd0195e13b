//! Synthetic multi-task data, training, evaluation and the allocation ablation.

pub mod ablation;
pub mod eval;
pub mod experiment;
pub mod optim;
pub mod tasks;
pub mod train;

pub use ablation::{check_budgets, run_ablation, AblationRow, AblationStrategy, AblationTable};
pub use eval::{evaluate_all, evaluate_samples, TaskEval};
pub use experiment::{build_model, prepare, run_experiment, run_prepared, shared_lora_baseline, Prepared, RunOutcome};
pub use optim::{adamw_step, clip_grad_norm, total_loss, total_loss_tape, AdamState, AdamW, LrSchedule};
pub use tasks::{gen_tasks, Datasets, TaskData, TaskKind, TaskSpec};
pub use train::{forgetting_delta, lr_at, pretrain_backbone, train, MetricRecord, PretrainConfig, RunMetrics, TrainConfig};
