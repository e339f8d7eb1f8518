//! Losses, metrics, synthetic data and the optimisation loop.

pub mod dataset;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod train;

pub use dataset::{make_dataset, Dataset, DatasetConfig, MetalBin, Sample};
pub use losses::{LossConfig, Targets};
pub use manifest::{read_manifest, read_split, write_dataset, Manifest};
pub use metrics::Metrics;
pub use train::{
    check_compatible, curve_csv, evaluate_fbp, evaluate_with, load_checkpoint, prepare_samples, CurveRow, Prepped, Scored,
    TrainConfig, Trainer, Variant,
};
