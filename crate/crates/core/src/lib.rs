//! Low-light image enhancement by additive decomposition of log-domain latent
//! features, followed by guided transformer refinement.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decomposer;
pub mod error;
pub mod evaluator;
pub mod gftb;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod optim;
pub mod params;
pub mod refiner;
pub mod report;
pub mod strategy;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use imaging::{GuidanceKind, GuidanceMap, LogImage, PixelImage};
pub use strategy::{Combine, Space, Strategy};
pub use tensor::{Shape, Tensor};

pub use checkpoint::{load_decomposer, load_refiner, save_decomposer, save_refiner};
pub use config::{Profile, Stage, TrainConfig};
pub use dataset::{scan_pairs, ImagePair, PairIndex};
pub use decomposer::{DecomposerConfig, DecomposerWeights};
pub use evaluator::{eval_dataset, psnr, ssim, swap_protocol, MetricReport, SwapResult};
pub use gftb::{GftbConfig, GuidanceFusion};
pub use refiner::{enhance, BranchTag, RefinerConfig, RefinerWeights};
pub use report::emit_plot_data;
pub use trainer::{
    ablation_study, stability_study, train_decomposition, train_enhancement, AblationReport,
    StabilityReport, TrainRunRecord,
};
