//! Multi-expert diffusion denoisers built by mixing the parameters of a
//! small set of basis models.

pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalbench;
pub mod gradcheck;
pub mod numerics;
pub mod remix;
pub mod training;

pub use error::{Error, Result};
