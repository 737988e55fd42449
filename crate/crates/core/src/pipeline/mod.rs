//! The end-to-end few-shot keypoint detector: frozen encoder, prototypes,
//! feature modulation, descriptors, multi-scale localization heads with
//! covariance and distinctiveness learning, auxiliary keypoints, episodic
//! training, and inference with fused uncertainty.

pub mod analysis;
pub mod aux;
pub mod detect;
pub mod features;
pub mod forward;
pub mod loss;
pub mod model;
pub mod train;

pub use analysis::{evaluate, EvalReport};
pub use detect::{compute_ukp, detect, detect_with_prototypes, KeypointEstimate};
pub use loss::{
    encode_episode, episode_loss_graph, episode_loss_value, EncodedEpisode, LossBreakdown,
};
pub use model::{ModelParams, ModelState};
pub use train::{episode_grad_check, train, train_from, TrainOutcome, TrainRecord, TrainSnapshot};

use crate::autodiff::AdError;
use crate::grid::GridError;
use crate::synth::DataError;
use crate::tensor::TensorError;
use crate::uncertainty::UncertaintyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("image {width}x{height} is not square or not divisible by patch {patch}")]
    BadImageSize {
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("keypoint ({x}, {y}) outside the image")]
    KeypointOutsideImage { x: f64, y: f64 },
    #[error("feature map has {features} channels, prototype {prototype}")]
    ChannelMismatch { features: usize, prototype: usize },
    #[error("episode has no supervisable keypoints")]
    NoSupervision,
    #[error("no visible support keypoint for any requested type")]
    NoVisibleSupport,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Miniature configuration used by gradient checks and fast tests: one
/// coarse scale, a handful of channels, two species.
pub fn miniature_config() -> crate::config::RunConfig {
    let c = crate::config::RunConfig {
        image_size: 72,
        patch_size: 12,
        channels: 8,
        descriptor_dim: 12,
        descriptor_pool: 2,
        head_hidden: 6,
        sd_hidden: 4,
        group_hidden: 6,
        latent_dim: 4,
        scales: vec![4],
        group_size: 2,
        species_count: 2,
        images_per_species: 8,
        test_species_fraction: 0.5,
        train_episodes: 40,
        eval_episodes: 8,
        val_every: 0,
        ..Default::default()
    };
    c.validate().expect("miniature config is valid");
    c
}
