//! Speckle denoising of grayscale images with block-matched steered
//! mixture-of-experts (SMoE) regression.
//!
//! The pipeline groups similar patches by block matching, fits a small
//! Gaussian mixture-of-experts model to every patch in a group by gradient
//! descent on a composite MSE + SSIM loss, fuses the decoded models, and
//! aggregates the fused estimates back into the image.
//!
//! ```no_run
//! use bmsmoe::{denoise_image, load_image, save_image, DenoiseConfig};
//!
//! let noisy = load_image("scan.pgm")?;
//! let (clean, stats) = denoise_image(&noisy, &DenoiseConfig::default())?;
//! save_image(&clean, "scan.denoised.pgm")?;
//! println!("{} groups", stats.groups);
//! # Ok::<(), bmsmoe::Error>(())
//! ```
//!
//! Group processing runs on rayon when the default `parallel` feature is
//! enabled; without it, or with `workers = 1`, everything runs serially and
//! produces bit-identical output.

pub mod assessment;
pub mod block_matching;
pub mod error;
pub mod fitting;
pub mod image;
pub mod pipeline;
pub mod smoe;

pub use assessment::{
    add_speckle, gmsd, psnr, ssim_image, NoiseConfig, NoiseDistribution, QualityReport,
};
pub use block_matching::{
    match_block, patch_distance, plan_references, BlockMatchConfig, Member, PatchStack,
};
pub use error::{Error, Result};
pub use fitting::{
    composite_loss, fit_patch, loss_gradient, ssim_block, FitConfig, FitResult, FitState,
};
pub use image::{extract_patch, load_image, save_image, Accumulator, ImageBuffer, Patch};
pub use pipeline::{denoise_group, denoise_image, DenoiseConfig, DenoiseStats, FusionMode};
pub use smoe::{
    decode, decode_1d, gates_eval, init_model, kernel_eval, Kernel2D, SampleGrid, SmoeModel,
};
