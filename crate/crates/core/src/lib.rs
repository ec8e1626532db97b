//! Desk-scale laboratory for analysing denoising-diffusion segmentation.
//!
//! Small conditional denoisers are trained under four regimes (feed-forward
//! segmentation, diffusion segmentation, mask recovery and image generation)
//! on synthetic datasets whose masks mimic lesion, nuclei and tumor
//! segmentation tasks. The crate measures segmentation quality and
//! calibration, profiles errors and losses per timestep, and compares them
//! with an analytic per-pixel Bayes oracle.

pub mod autodiff;
pub mod cli;
mod csvio;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod fourier;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
