//! Score-based diffusion denoising of 3-D point clouds.
//!
//! A noisy cloud is treated as a sample of a diffusion process whose clean
//! state is the underlying surface. [`sampler::denoise`] estimates how far
//! along that process the input is, picks a short schedule of timesteps, and
//! walks each patch back to timestep 0 with scores from a
//! [`score::ScoreProvider`]: either the exact nearest-neighbour
//! [`score::OracleScore`] or a trained [`score::ScoreNet`].

pub mod cli;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod trainer;

pub use error::{Error, Result};
