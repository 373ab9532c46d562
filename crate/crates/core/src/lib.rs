//! Lifelong learning for dense networks: consolidate old tasks with a
//! weighted penalty, grow the network with function-preserving transforms
//! chosen by a learned controller, and distill back to the starting size.

pub mod checkpoint;
pub mod controller;
pub mod distill;
pub mod error;
pub mod lifelong;
pub mod netcore;
pub mod regularize;
pub mod seeds;
pub mod transform;

pub use checkpoint::Checkpoint;
pub use controller::{Controller, RewardScope, SearchConfig};
pub use distill::DistillConfig;
pub use error::{RecError, Result};
pub use lifelong::{AccuracyMatrix, Hyperparams, Method, MethodConfig, RunOutput, StudentStart, TaskKind, TaskSequence};
pub use netcore::{Activation, Arch, Dataset, DenseNet, Head};
pub use regularize::{PenaltyConfig, Prior, TrainSchedule};
pub use transform::{Action, TransformLimits};
