use super::{dist_sq, FarthestPointSampler, NeighborIndex, Point3, PointCloud};
use crate::error::{Error, Result};

/// A local neighbourhood of a parent cloud.
///
/// `indices` start with the center and continue by distance to it, so the
/// highlighted (`mask`) points are a prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub indices: Vec<usize>,
    pub center_index: usize,
    pub mask: Vec<bool>,
}

impl Patch {
    /// The `size` nearest points to `center_index`, with the `mask_size`
    /// nearest of them highlighted.
    pub fn around(index: &NeighborIndex, center_index: usize, size: usize, mask_size: usize) -> Result<Self> {
        let center = *index
            .points()
            .get(center_index)
            .ok_or_else(|| Error::invalid(format!("center {center_index} out of range")))?;
        let mut indices = index.knn(center, size)?;
        // lower-indexed duplicates can crowd the center out of its own patch
        match indices.iter().position(|&i| i == center_index) {
            Some(pos) => indices[..=pos].rotate_right(1),
            None => {
                indices.pop();
                indices.insert(0, center_index);
            }
        }
        let highlighted = mask_size.min(indices.len());
        let mask = (0..indices.len()).map(|i| i < highlighted).collect();
        Ok(Self {
            indices,
            center_index,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// How many patches [`extract_patches`] produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoverageMode {
    /// The shortest FPS prefix of centers whose patches cover every point.
    #[default]
    Full,
    /// At least this many patches, continuing past it until every point is covered.
    AtLeast(usize),
}

/// Splits `cloud` into overlapping patches of `patch_size` points centred on
/// farthest-point-sampled seeds (starting from index 0).
pub fn extract_patches(
    cloud: &PointCloud,
    index: &NeighborIndex,
    patch_size: usize,
    coverage: CoverageMode,
) -> Result<Vec<Patch>> {
    let n = cloud.len();
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if index.len() != n {
        return Err(Error::invalid("neighbour index does not match the cloud"));
    }
    let size = patch_size.min(n);
    let min_patches = match coverage {
        CoverageMode::Full => 1,
        CoverageMode::AtLeast(r) => r.max(1),
    };
    let mut covered = vec![false; n];
    let mut uncovered = n;
    let mut patches = Vec::new();
    for center in FarthestPointSampler::new(cloud, 0)? {
        let patch = Patch::around(index, center, size, size)?;
        for &i in &patch.indices {
            if !covered[i] {
                covered[i] = true;
                uncovered -= 1;
            }
        }
        patches.push(patch);
        if uncovered == 0 && patches.len() >= min_patches {
            break;
        }
    }
    Ok(patches)
}

/// Reassembles per-patch results into one cloud.
///
/// Each point takes its position from the patch whose center (measured in
/// `original`) is closest to the point's original position; ties go to the
/// earlier patch.
pub fn stitch_patches(original: &PointCloud, patches: &[(Patch, Vec<Point3>)]) -> Result<PointCloud> {
    let n = original.len();
    let pts = original.points();
    let mut best: Vec<Option<(f64, Point3)>> = vec![None; n];
    for (patch, positions) in patches {
        if positions.len() != patch.indices.len() {
            return Err(Error::invalid(format!(
                "patch centred at {} has {} indices but {} positions",
                patch.center_index,
                patch.indices.len(),
                positions.len()
            )));
        }
        let center = *pts
            .get(patch.center_index)
            .ok_or_else(|| Error::invalid(format!("center {} out of range", patch.center_index)))?;
        for (&i, &pos) in patch.indices.iter().zip(positions) {
            if i >= n {
                return Err(Error::invalid(format!("patch index {i} out of range")));
            }
            let d = dist_sq(pts[i], center);
            match best[i] {
                Some((bd, _)) if d >= bd => {}
                _ => best[i] = Some((d, pos)),
            }
        }
    }
    let out = best
        .into_iter()
        .enumerate()
        .map(|(index, b)| b.map(|(_, p)| p).ok_or(Error::Coverage { index }))
        .collect::<Result<Vec<_>>>()?;
    PointCloud::new(out)
}
