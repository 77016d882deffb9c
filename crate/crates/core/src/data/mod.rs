//! Synthetic training data: procedural pairs, augmentation, weighted
//! sampling, storage, and tensor conversion.

pub mod augment;
pub mod convert;
pub mod sampler;
pub mod store;
pub mod synth;

pub use augment::{augment_subject, AugmentPlan};
pub use convert::{fit_mask, fit_scene, fit_subject, load_mask, load_rgb, mask_to_tensor, rgb_to_tensor, tensor_to_rgb, Batch};
pub use sampler::{weighted_sampler, WeightedSampler};
pub use store::{dataset_checksum, Dataset, Manifest, Record};
pub use synth::{gen_pair, Category, SamplePair, SynthSpec, BENCHMARK_START};
