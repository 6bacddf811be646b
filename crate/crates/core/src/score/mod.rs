//! Per-point score vectors `ŝ(x^t | x^T)`: an exact nearest-neighbour oracle
//! and a trainable graph network.

mod network;
mod oracle;

pub use network::{
    fuse_gradients, patch_frame, FeatureFusion, GradientFusion, NetHyper, ScoreNet, POSITION_ENCODING_DIM,
    TIME_EMBEDDING_DIM,
};
pub(crate) use network::{points_tensor, tensor_points, timestep_ratio};
pub use oracle::{nearest_displacements, OracleScore};

use crate::error::Result;
use crate::geometry::{add, scale, Point3};

/// Maps the local coordinates handed to a provider back to world space:
/// `world = local * scale + offset`. Scores are displacements, so they scale
/// by `scale` and ignore `offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub offset: Point3,
    pub scale: f64,
}

impl Frame {
    pub const IDENTITY: Frame = Frame {
        offset: [0.0; 3],
        scale: 1.0,
    };

    pub fn to_world(&self, local: Point3) -> Point3 {
        add(scale(local, self.scale), self.offset)
    }
}

impl Default for Frame {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Something that predicts a score vector for every point of `current`.
///
/// `original` is the noisy cloud the iteration started from, index-aligned
/// with `current`; `t` and `t_start` are the timesteps of `current` and
/// `original`.
pub trait ScoreProvider: Sync {
    fn scores(
        &self,
        current: &[Point3],
        original: &[Point3],
        t: usize,
        t_start: usize,
        frame: Frame,
    ) -> Result<Vec<Point3>>;
}

impl<P: ScoreProvider + ?Sized> ScoreProvider for &P {
    fn scores(
        &self,
        current: &[Point3],
        original: &[Point3],
        t: usize,
        t_start: usize,
        frame: Frame,
    ) -> Result<Vec<Point3>> {
        (**self).scores(current, original, t, t_start, frame)
    }
}

/// Returns the same vector for every point. Handy as a stub and for
/// exercising the sampler without a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantScore(pub Point3);

impl ScoreProvider for ConstantScore {
    fn scores(&self, current: &[Point3], _: &[Point3], _: usize, _: usize, _: Frame) -> Result<Vec<Point3>> {
        Ok(vec![self.0; current.len()])
    }
}
