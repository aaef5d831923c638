//! Datasets: the `ZDC1` container, preprocessing, the synthetic shower
//! generator and summary statistics.

mod container;
mod detector;
mod preprocess;
mod stats;
pub mod synth;
mod transform;

pub use container::{load_dataset, save_dataset, Dataset, ParticleFeatures, ShowerImage, FEATURE_NAMES, NUM_FEATURES};
pub use detector::Detector;
pub use preprocess::{split_dataset, DatasetSplit, PreprocStats};
pub use stats::{dataset_stats, DatasetStats, FeatureHistogram};
pub use synth::{synth_generate, SynthConfig};
pub use transform::{inverse_transform, inverse_transform_value, log_transform};
