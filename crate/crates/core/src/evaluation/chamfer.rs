//! Exact nearest neighbours and Chamfer distances.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::Vec3;

/// Exact nearest-neighbour index over a fixed point set.
pub struct NearestNeighbors {
    tree: ImmutableKdTree<f64, 3>,
}

impl NearestNeighbors {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("nearest-neighbour index over no points"));
        }
        Ok(NearestNeighbors {
            tree: ImmutableKdTree::new_from_slice(points),
        })
    }

    /// `(index, squared distance)` of the closest point.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let n = self.tree.nearest_one::<SquaredEuclidean>(q);
        (n.item as usize, n.distance)
    }
}

/// O(n m) nearest neighbour, the reference for [`NearestNeighbors`].
pub fn nearest_brute_force(points: &[Vec3], q: &Vec3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (0..3).map(|a| (p[a] - q[a]) * (p[a] - q[a])).sum::<f64>();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChamferNorm {
    /// Unsquared Euclidean distances: the reported metric.
    L1,
    /// Squared distances: the alignment objective.
    Squared,
}

/// `½ [mean_x min_y d(x, y) + mean_y min_x d(x, y)]`.
pub fn chamfer(a: &[Vec3], b: &[Vec3], norm: ChamferNorm) -> Result<f64> {
    let ta = NearestNeighbors::new(a)?;
    let tb = NearestNeighbors::new(b)?;
    Ok(chamfer_with(a, &ta, b, &tb, norm))
}

pub(crate) fn chamfer_with(a: &[Vec3], ta: &NearestNeighbors, b: &[Vec3], tb: &NearestNeighbors, norm: ChamferNorm) -> f64 {
    let f = |d2: f64| match norm {
        ChamferNorm::L1 => d2.sqrt(),
        ChamferNorm::Squared => d2,
    };
    let ab = a.iter().map(|p| f(tb.nearest(p).1)).sum::<f64>() / a.len() as f64;
    let ba = b.iter().map(|p| f(ta.nearest(p).1)).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}
