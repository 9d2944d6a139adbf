//! Incremental classifier, layers, snapshots and checkpoints.

mod backbone;
mod classifier;
mod layers;
mod session;
mod snapshot;

pub use backbone::{Architecture, Backbone};
pub use classifier::{IncrementalClassifier, TaskHead};
pub(crate) use classifier::to2;
pub(crate) use layers::join;
pub use layers::{global_avg_pool, BatchNorm, Conv2d, Linear, Module, TensorKind};
pub use session::{BnBatchStats, BnProbe, Mode, Session};
pub use snapshot::{padded_softmax, BatchNormStats, LayerStats, ModelSnapshot};
