//! Training, evaluation, ablation and inference around the model.

pub mod ablate;
pub mod config;
pub mod data;
pub mod eval;
pub mod infer;
pub mod model;
pub mod optim;
pub mod train;

pub use ablate::{ablate, parse_axes, AblationTable, Axis};
pub use config::{LrSchedule, RunConfig};
pub use data::{Dataset, Example};
pub use eval::{evaluate, evaluate_checkpoint, MaskPredictor, OraclePredictor};
pub use infer::infer;
pub use model::{Batch, RefSegModel, TokenizedExpression};
pub use optim::AdamW;
pub use train::{load_checkpoint, save_checkpoint, train, Trainer, TrainOutcome};
