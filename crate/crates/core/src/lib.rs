//! Discriminative region proposal adversarial networks for paired
//! image-to-image translation.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod fake_mask;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod region_proposal;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use data::{load_paired_dir, make_toy_dataset, PairedDataset, PairedSample, ToyTaskSpec};
pub use error::{Error, Result};
pub use fake_mask::{composite, crop, MaskedPair};
pub use metrics::{psnr, ssim, MetricResult};
pub use models::{Generator, PatchDiscriminator, PatchPadding, Reviser};
pub use objectives::{LossReport, ObjectiveWeights};
pub use region_proposal::{propose_region, GeometryConfig, Region, ScoreMap, Window};
pub use tensor::Tensor;
pub use trainer::{evaluate, train, EvalReport, TrainState};
