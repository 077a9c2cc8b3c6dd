//! Synthetic data, training, restoration, metrics and benchmarking.

mod config;
mod degrade;
mod io;
mod metrics;
mod restore;
mod synth;
mod train;

pub use config::RunConfig;
pub use degrade::{degrade, Degradation, TaskSpec};
pub use io::{read_image, write_image};
pub use metrics::{psnr, ssim, ImageScore, MetricsReport, PSNR_CAP};
pub use restore::{
    bench, evaluate, restore, sequential_restore, BenchReport, EvalReport, EQUIVALENCE_TOL,
};
pub use synth::{derive_seed, synth_clean};
pub use train::{train, training_pair, TrainConfig, TrainReport};
