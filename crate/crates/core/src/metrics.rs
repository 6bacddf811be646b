//! Distances between clouds and from clouds to analytic surfaces.

use std::fmt;

use rayon::prelude::*;

use crate::datagen::Shape;
use crate::error::{Error, Result};
use crate::geometry::{dist_sq, NeighborIndex, PointCloud};

fn mean_nearest_sq(from: &PointCloud, to: &NeighborIndex) -> f64 {
    let sum: f64 = from
        .points()
        .par_iter()
        .map(|&p| dist_sq(p, to.points()[to.nearest(p)]))
        .sum();
    sum / from.len() as f64
}

/// Mean squared nearest-neighbour distance from `a` to `b` plus the same
/// from `b` to `a`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two non-empty clouds"));
    }
    let (ia, ib) = (NeighborIndex::new(a), NeighborIndex::new(b));
    Ok(mean_nearest_sq(a, &ib) + mean_nearest_sq(b, &ia))
}

/// Mean unsigned distance from the points of `cloud` to `shape`.
pub fn point_to_surface(cloud: &PointCloud, shape: &Shape) -> Result<f64> {
    shape.validate()?;
    let sum: f64 = cloud.points().par_iter().map(|&p| shape.distance(p)).sum();
    Ok(sum / cloud.len() as f64)
}

/// Evaluation of one denoised cloud.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub chamfer: Option<f64>,
    pub p2s_mean: Option<f64>,
    pub sigma_estimated: Option<f64>,
    pub tau_hat: Option<usize>,
    pub wall_time: Option<f64>,
}

fn cell<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "chamfer,p2s_mean,sigma_estimated,tau_hat,wall_time";

    pub fn csv_row(&self) -> String {
        [
            cell(&self.chamfer.map(|v| format!("{v:.9e}"))),
            cell(&self.p2s_mean.map(|v| format!("{v:.9e}"))),
            cell(&self.sigma_estimated.map(|v| format!("{v:.9e}"))),
            cell(&self.tau_hat),
            cell(&self.wall_time.map(|v| format!("{v:.3}"))),
        ]
        .join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("chamfer", self.chamfer.map(|v| format!("{v:.6e}"))),
            ("p2s_mean", self.p2s_mean.map(|v| format!("{v:.6e}"))),
            ("sigma_estimated", self.sigma_estimated.map(|v| format!("{v:.6e}"))),
            ("tau_hat", self.tau_hat.map(|v| v.to_string())),
            ("wall_time_s", self.wall_time.map(|v| format!("{v:.3}"))),
        ];
        for (name, value) in rows {
            writeln!(f, "{name:<16} {}", value.unwrap_or_else(|| "-".into()))?;
        }
        Ok(())
    }
}
