use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use super::{dist_sq, Point3, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact k-nearest-neighbour index over a fixed point set (a kd-tree).
///
/// Results are ordered by ascending distance; equal distances are ordered
/// by ascending point index, so every query agrees with a brute-force scan.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Point3>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

/// Heap entry ordered by (distance, index).
#[derive(Debug, Clone, Copy)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl NeighborIndex {
    pub fn new(cloud: &PointCloud) -> Self {
        Self::from_points(cloud.points().to_vec())
    }

    pub fn from_points(points: Vec<Point3>) -> Self {
        let mut perm: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build(&points, &mut perm, 0, &mut nodes);
        }
        Self {
            points,
            perm,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// The `k` nearest indices to `query`, closest first.
    pub fn knn(&self, query: Point3, k: usize) -> Result<Vec<usize>> {
        Ok(self.knn_with_dist(query, k)?.into_iter().map(|(i, _)| i).collect())
    }

    /// Like [`knn`](Self::knn) but also returns squared distances.
    pub fn knn_with_dist(&self, query: Point3, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.points.len() {
            return Err(Error::invalid(format!(
                "k = {k} must lie in 1..={}",
                self.points.len()
            )));
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort_unstable();
        Ok(out.into_iter().map(|c| (c.index, c.d2)).collect())
    }

    /// Index of the single nearest point.
    pub fn nearest(&self, query: Point3) -> usize {
        self.knn_with_dist(query, 1).expect("index is non-empty")[0].0
    }

    /// Runs [`knn`](Self::knn) for every query in parallel.
    pub fn knn_batch(&self, queries: &[Point3], k: usize) -> Result<Vec<Vec<usize>>> {
        queries.par_iter().map(|&q| self.knn(q, k)).collect()
    }

    fn search(&self, node: usize, q: Point3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &index in &self.perm[start..end] {
                    let cand = Candidate {
                        d2: dist_sq(q, self.points[index]),
                        index,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap holds k items") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // Equality must still descend: a tie at the bound may carry a lower index.
                if heap.len() < k || diff * diff <= heap.peek().map_or(f64::INFINITY, |c| c.d2) {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

fn build(points: &[Point3], perm: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if perm.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + perm.len(),
        });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in perm.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    if hi[axis] - lo[axis] == 0.0 {
        // all coincident
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + perm.len(),
        });
        return id;
    }
    let mid = perm.len() / 2;
    perm.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[perm[mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (lp, rp) = perm.split_at_mut(mid);
    let left = build(points, lp, offset, nodes);
    let right = build(points, rp, offset + mid, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}
