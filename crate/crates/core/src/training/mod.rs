//! Optimizer, schedules, the pre-training and fine-tuning loops, metrics and
//! run artifacts.

mod finetune;
mod metrics;
mod optim;
pub mod plot;
mod pretrain;
mod probe;
mod record;

pub use finetune::{cdnet_config, evaluate_cd, finetune, init_cdnet, inverse_frequency_weights, load_cdnet, EvalReport, FinetuneOutcome, FinetuneReport};
pub use metrics::{collapse_statistic, collapse_statistic_by_category, confusion, evaluate_f1, Confusion, F1Scores};
pub use optim::{poly_lr, sgd_step, OptimizerConfig};
pub use pretrain::{pretrain, PretrainOutcome};
pub use probe::{load_sdrl_model, probe, ProbeReport};
pub use record::{read_csv, write_csv, write_json, FinetuneEpochLog, PretrainEpochLog, RunRecord, StepLog};
