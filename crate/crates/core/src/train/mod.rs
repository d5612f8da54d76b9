//! Optimization loop, evaluation metrics and ablation sweeps.

pub mod ablation;
pub mod metrics;
pub mod optim;
pub mod trainer;


pub use ablation::{
    ablate_memory, ablate_mlp_depth, ablate_size, gains_to_csv, median, relative_gains, AblationTable, Cell,
    ExperimentSetup, RunResult, Runner, SeedData, SPLIT_SALT,
};
pub use metrics::{Metrics, MetricsReport};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind};
pub use trainer::{batch_loss_and_grad, evaluate, log_to_csv, prepare, train, LogRow, Prepared, TrainConfig, TrainOutcome};
