//! Training, checkpointing, sliding-window inference and evaluation.

mod eval;
mod gradsuite;
mod infer;
mod metrics;
mod train;

pub use eval::{dice, dice_table, endpoint_error, mean_dice, DiceRow, EndpointError};
pub use gradsuite::{check_op, check_ops, scheme_divergence, OpCheck, OPS};
pub use infer::{register_volume, tile_origins, RegistrationMetrics, RegistrationResult, Stitcher, TileReport};
pub use metrics::{EpochSummary, MetricRecord, MetricsLog, CSV_HEADER};
pub use train::{
    load_model, save_model, train, CheckpointHeader, RunOutputs, RunSummary, TrainConfig, TrainState, Trainer,
    CHECKPOINT_FORMAT,
};
