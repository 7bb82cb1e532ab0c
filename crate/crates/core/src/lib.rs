//! Counterfactual video explanations by optimizing the initial latent of a
//! first-frame-conditioned video diffusion model, plus the baselines and
//! metrics used to evaluate them.

pub mod baselines;
pub mod bttf;
pub mod classifier;
pub mod codec;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod video;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;
pub use video::{Frame, Video};
