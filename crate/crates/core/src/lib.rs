//! Blind image restoration with a latent diffusion prior and a learned
//! forward-operator surrogate, at desk scale.
//!
//! The pieces, bottom up:
//!
//! * [`schedule`]: variance-preserving noise schedule and DDIM variances.
//! * [`prior`]: analytic Gaussian-mixture latent prior with exact noise
//!   predictions and classifier-free guidance.
//! * [`codec`]: invertible linear map between pixels and latents.
//! * [`grad`]: a small reverse-mode autodiff graph and Adam.
//! * [`operators`]: ground-truth degradations and trainable surrogates.
//! * [`sampler`]: SDEdit, DDIM, guidance and time-travel primitives.
//! * [`blind`]: operator initialisation and the joint restoration loop.
//! * [`oracle`]: closed-form and brute-force references.
//! * [`harness`]: configs, file formats, problem generation, reports, CLI.

pub mod blind;
pub mod codec;
pub mod error;
pub mod grad;
pub mod harness;
pub mod operators;
pub mod ops;
pub mod oracle;
pub mod prior;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Image, Latent, Tensor};
