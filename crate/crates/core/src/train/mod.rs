//! Masked MLP training on a drifting regression stream.

pub mod mlp;
pub mod optim;
pub mod session;
pub mod sweep;
pub mod task;

pub use mlp::{Activation, Batch, Mlp};
pub use optim::{OptimizerConfig, OptimizerKind};
pub use session::{train_dst, train_static, DstConfig, DstMethod, RunRecord, RunRow, Session, TrainerConfig};
pub use task::{DriftTask, TaskConfig};
pub use sweep::{
    default_net, prepare_out_dir, read_summary, run_matrix, Experiment, ExperimentConfig, Mode, NetRef, RunKey,
    RunSeeds, SummaryRow, SweepReport,
};
