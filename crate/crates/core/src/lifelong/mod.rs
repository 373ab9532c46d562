//! Task sequences, the per-method training loop and accuracy metrics.

pub mod data;
pub mod metrics;
pub mod runner;
pub mod tasks;

pub use data::{load_idx, Splits, SyntheticSpec, VALIDATION_RATIO};
pub use metrics::{avg_per_task, forgetting_curve, AccuracyMatrix};
pub use runner::{
    ablation_suite, fixed_widen_action, run_grid, run_sequence, AblationRow, Hyperparams, Method, MethodConfig,
    RunOutput, StudentStart, TaskLog,
};
pub use tasks::{gen_permuted_tasks, gen_rotated_tasks, gen_split_tasks, gen_tasks, Task, TaskKind, TaskSequence, TaskTransform};
