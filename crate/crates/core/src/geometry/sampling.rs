use super::{dist_sq, PointCloud};
use crate::error::{Error, Result};

/// Incremental greedy farthest point sampling.
///
/// Each call to [`next`](Iterator::next) returns the unpicked point whose
/// distance to the picked set is largest, lowest index on ties. The first
/// pick is the seed.
pub struct FarthestPointSampler<'a> {
    cloud: &'a PointCloud,
    min_d2: Vec<f64>,
    picked: Vec<bool>,
    next_seed: Option<usize>,
    remaining: usize,
}

impl<'a> FarthestPointSampler<'a> {
    pub fn new(cloud: &'a PointCloud, seed_index: usize) -> Result<Self> {
        if seed_index >= cloud.len() {
            return Err(Error::invalid(format!(
                "seed index {seed_index} out of range for {} points",
                cloud.len()
            )));
        }
        Ok(Self {
            cloud,
            min_d2: vec![f64::INFINITY; cloud.len()],
            picked: vec![false; cloud.len()],
            next_seed: Some(seed_index),
            remaining: cloud.len(),
        })
    }

    fn take(&mut self, index: usize) -> usize {
        self.picked[index] = true;
        self.remaining -= 1;
        let c = self.cloud.points()[index];
        for (d, p) in self.min_d2.iter_mut().zip(self.cloud.points()) {
            let nd = dist_sq(*p, c);
            if nd < *d {
                *d = nd;
            }
        }
        index
    }
}

impl Iterator for FarthestPointSampler<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        if let Some(seed) = self.next_seed.take() {
            return Some(self.take(seed));
        }
        let mut best: Option<usize> = None;
        for i in 0..self.min_d2.len() {
            if self.picked[i] {
                continue;
            }
            match best {
                Some(b) if self.min_d2[i] <= self.min_d2[b] => {}
                _ => best = Some(i),
            }
        }
        best.map(|b| self.take(b))
    }
}

/// Picks `m` indices by greedy farthest point sampling starting at `seed_index`.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    if m == 0 || m > cloud.len() {
        return Err(Error::invalid(format!(
            "cannot sample {m} of {} points",
            cloud.len()
        )));
    }
    Ok(FarthestPointSampler::new(cloud, seed_index)?.take(m).collect())
}
