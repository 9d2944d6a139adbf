//! Datasets, task schedules, batching and coreset storage.

mod audit;
mod cifar;
mod coreset;
mod dataset;
mod schedule;
mod toy;

pub use audit::{epoch_batches, AccessAuditor, AuditedData};
pub use cifar::{load_cifar100, parse_cifar100, resolve_data_root, CIFAR100_CLASSES, DATA_ROOT_ENV};
pub use coreset::CoresetStore;
pub use dataset::{task_subset, Augmentation, ImageDims, LabeledDataset, Normalizer, Split};
pub use schedule::TaskSchedule;
pub use toy::{generate as generate_toy, ToySpec};
