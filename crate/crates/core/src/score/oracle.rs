use super::{Frame, ScoreProvider};
use crate::error::{Error, Result};
use crate::geometry::{scale, sub, NeighborIndex, Point3, PointCloud};

/// `NN(x, clean) - x` for every query point.
pub fn nearest_displacements(clean: &NeighborIndex, points: &[Point3]) -> Result<Vec<Point3>> {
    if clean.is_empty() {
        return Err(Error::invalid("clean reference cloud is empty"));
    }
    Ok(points
        .iter()
        .map(|&p| sub(clean.points()[clean.nearest(p)], p))
        .collect())
}

/// Exact score: the displacement from each point to its nearest point of a
/// known clean cloud.
#[derive(Debug, Clone)]
pub struct OracleScore {
    index: NeighborIndex,
}

impl OracleScore {
    pub fn new(clean: &PointCloud) -> Self {
        Self {
            index: NeighborIndex::new(clean),
        }
    }

    pub fn clean(&self) -> &[Point3] {
        self.index.points()
    }
}

impl ScoreProvider for OracleScore {
    fn scores(&self, current: &[Point3], _: &[Point3], _: usize, _: usize, frame: Frame) -> Result<Vec<Point3>> {
        if frame == Frame::IDENTITY {
            return nearest_displacements(&self.index, current);
        }
        let inv = 1.0 / frame.scale;
        Ok(current
            .iter()
            .map(|&p| {
                let w = frame.to_world(p);
                scale(sub(self.index.points()[self.index.nearest(w)], w), inv)
            })
            .collect())
    }
}
