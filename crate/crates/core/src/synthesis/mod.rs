//! Model inversion: synthesize replay images from a frozen teacher.

mod generator;
mod losses;
mod train;

pub use generator::{Generator, GeneratorConfig};
pub use losses::{
    content_loss, diversity_loss, gaussian_kernel, moments_from_probes, smoothness_prior_loss, stat_alignment_loss,
    BatchMoments,
};
pub(crate) use losses::{cross_entropy, one_hot};
pub use train::{
    train_generator, InversionStep, InversionWeights, SynthesisBackend, SynthesisConfig, SynthesisGenerator,
    SyntheticBatch,
};
