//! Point clouds, exact nearest-neighbour search, farthest point sampling and
//! the patch machinery used to split a cloud for denoising and to put it back
//! together afterwards.

mod kdtree;
mod patch;
mod sampling;

pub use kdtree::NeighborIndex;
pub use patch::{extract_patches, stitch_patches, CoverageMode, Patch};
pub use sampling::{farthest_point_sample, FarthestPointSampler};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist_sq(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// An ordered, non-empty set of 3-D points with finite coordinates.
///
/// Point order is meaningful: reverse steps update positions in place, so
/// index `i` refers to the same physical sample throughout denoising.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with collections.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            c = add(c, *p);
        }
        scale(c, 1.0 / self.points.len() as f64)
    }

    /// Gathers the listed points into a new cloud.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let pts = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pts)
    }

    /// Moves the cloud so that its centroid sits at the origin and its
    /// farthest point at radius 1.
    pub fn normalize_unit_sphere(&self) -> (PointCloud, Normalization) {
        let center = self.centroid();
        let radius = self
            .points
            .iter()
            .map(|p| norm(sub(*p, center)))
            .fold(0.0, f64::max);
        let scale = if radius > 0.0 { radius } else { 1.0 };
        let norm = Normalization { center, scale };
        (norm.apply(self), norm)
    }
}

/// Affine map `p -> (p - center) / scale` and its inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub center: Point3,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        center: [0.0; 3],
        scale: 1.0,
    };

    pub fn forward(&self, p: Point3) -> Point3 {
        scale(sub(p, self.center), 1.0 / self.scale)
    }

    pub fn inverse(&self, p: Point3) -> Point3 {
        add(scale(p, self.scale), self.center)
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|&p| self.forward(p)).collect(),
        }
    }

    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|&p| self.inverse(p)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
        assert!(PointCloud::new(vec![[f64::INFINITY, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn single_point_normalizes_to_origin() {
        let cloud = PointCloud::new(vec![[5.0, 5.0, 5.0]]).unwrap();
        let (out, n) = cloud.normalize_unit_sphere();
        assert_eq!(out.points(), &[[0.0, 0.0, 0.0]]);
        assert_eq!(n.center, [5.0, 5.0, 5.0]);
        assert_eq!(n.scale, 1.0);
    }

    #[test]
    fn cube_corners_have_unit_radius() {
        let mut pts = Vec::new();
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    pts.push([sx, sy, sz]);
                }
            }
        }
        let cloud = PointCloud::new(pts).unwrap();
        let (out, n) = cloud.normalize_unit_sphere();
        assert!((n.scale - 3f64.sqrt()).abs() < 1e-15);
        let max_r = out.points().iter().map(|&p| norm(p)).fold(0.0, f64::max);
        assert!((max_r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trips() {
        let pts: Vec<Point3> = (0..50)
            .map(|i| {
                let f = i as f64;
                [f.sin() * 3.0 + 10.0, (f * 0.7).cos() - 4.0, f * 0.01]
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let (out, n) = cloud.normalize_unit_sphere();
        let max_r = out.points().iter().map(|&p| norm(p)).fold(0.0, f64::max);
        assert!(max_r <= 1.0 + 1e-12);
        let back = n.invert(&out);
        for (a, b) in back.points().iter().zip(cloud.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }
}
