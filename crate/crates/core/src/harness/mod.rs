//! Cascaded generation, evaluation metrics and the command-line surface.

pub mod cli;
mod generate;
mod metrics;

pub use generate::{cascaded_generate, Cascade, GenerateOutput, GenerateRequest, LrShape, INFERENCE_NOISE_AUG_STEP};
pub use metrics::{evaluate, psnr, ssim, MetricsRecord, PSNR_CAP_DB, SSIM_WINDOW};
