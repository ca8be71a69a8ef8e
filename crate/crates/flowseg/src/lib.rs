//! Counterfactual lung-nodule segmentation on synthetic CT phantoms.
//!
//! The pipeline couples three small models: a 3D convolutional autoencoder
//! that compresses volumes to a latent grid, a rectified-flow velocity field
//! trained on those latents, and a weakly-supervised 2.5D slice classifier.
//! At segmentation time the flow is partially inverted and re-integrated
//! while classifier gradients push the latent toward "no nodule"; the
//! voxelwise residual between the input and the resulting counterfactual,
//! thresholded, is the predicted mask. Only slice-level labels are ever used
//! for supervision.
//!
//! Everything is deterministic given a seed: one root seed feeds named
//! sub-streams (`data`, `train`, `guidance`), tensors are f32, and tapes are
//! single-threaded. Parallelism only ever fans out across independent
//! volumes.

pub mod baselines;
pub mod config;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
