//! Channel planting: grow a small trained CNN by adding channels to one
//! group of layers at a time, training only the new weights against a
//! teacher network's outputs, and keeping each addition only while it lowers
//! the validation loss.
//!
//! The crate carries its own reverse-mode differentiation over rank-4
//! tensors ([`gradcore`]), the seven-layer networks and their weight-
//! preserving expansion ([`model`]), the distillation objective
//! ([`distill`]), SGD training ([`trainer`]), the planting search
//! ([`search`]) and dataset ingestion ([`data`]).

pub mod data;
pub mod distill;
mod error;
pub mod gradcore;
pub mod io;
pub mod model;
pub mod search;
pub mod seed;
pub mod trainer;

pub use data::{LabeledDataset, SplitSpec, Splits};
pub use distill::{combined_loss, kl_term, DistillLoss, KlForm};
pub use error::{Error, Result};
pub use gradcore::{ConvKernel, Gradients, Tape, Tensor4, Var};
pub use model::{ArchitectureSpec, ChannelConfig, Param, PlantInit, PlantableNetwork, Variant};
pub use search::{run_planting, CandidateMode, SearchConfig, SearchState, StepRecord};
pub use trainer::{
    lr_at_epoch, sgd_step, train, EpochLog, LossKind, LrSchedule, OptimizerState, TrainConfig,
};
