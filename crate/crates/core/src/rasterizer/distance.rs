//! Pixel-to-triangle geometry in NDC.

use super::jet::Scalar;

/// Twice the signed area below which a projected face counts as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-14;

pub type Point<S> = [S; 2];

#[derive(Clone, Copy, Debug)]
pub struct TriangleQuery<S> {
    /// Squared Euclidean distance from the pixel to the triangle boundary.
    pub dist_sq: S,
    pub inside: bool,
    /// Screen-space barycentric coordinates (not clamped).
    pub bary: [S; 3],
}

fn cross2<S: Scalar>(a: Point<S>, b: Point<S>) -> S {
    a[0] * b[1] - a[1] * b[0]
}

fn minus<S: Scalar>(a: Point<S>, b: Point<S>) -> Point<S> {
    [a[0] - b[0], a[1] - b[1]]
}

fn segment_dist_sq<S: Scalar>(p: Point<S>, q0: Point<S>, q1: Point<S>) -> S {
    let e = minus(q1, q0);
    let w = minus(p, q0);
    let len2 = e[0] * e[0] + e[1] * e[1];
    let t = ((w[0] * e[0] + w[1] * e[1]) / len2).clamp(0.0, 1.0);
    let dx = w[0] - e[0] * t;
    let dy = w[1] - e[1] * t;
    dx * dx + dy * dy
}

/// `None` for a degenerate (collinear) projection. Works for either
/// winding; the pixel is inside when all barycentrics are non-negative.
pub fn query<S: Scalar>(p: [f64; 2], tri: [Point<S>; 3]) -> Option<TriangleQuery<S>> {
    let [a, b, c] = tri;
    let area2 = cross2(minus(b, a), minus(c, a));
    if !(area2.val().abs() > DEGENERATE_AREA) {
        return None;
    }
    let p = [S::cst(p[0]), S::cst(p[1])];
    let bary = [
        cross2(minus(c, b), minus(p, b)) / area2,
        cross2(minus(a, c), minus(p, c)) / area2,
        cross2(minus(b, a), minus(p, a)) / area2,
    ];
    let inside = bary.iter().all(|w| w.val() >= 0.0);
    let d = [
        segment_dist_sq(p, a, b),
        segment_dist_sq(p, b, c),
        segment_dist_sq(p, c, a),
    ];
    let mut best = d[0];
    for &x in &d[1..] {
        if x.val() < best.val() {
            best = x;
        }
    }
    Some(TriangleQuery {
        dist_sq: best,
        inside,
        bary,
    })
}

/// Signed Euclidean distance from `pixel` to the triangle boundary:
/// positive inside, negative outside. `None` if the triangle is degenerate.
pub fn signed_distance(pixel: [f64; 2], tri: [[f64; 2]; 3]) -> Option<f64> {
    let q = query(pixel, tri)?;
    let d = q.dist_sq.sqrt();
    Some(if q.inside { d } else { -d })
}

/// sign(nu) * nu^2, the quantity fed to the occupancy function.
pub fn signed_sq_distance<S: Scalar>(q: &TriangleQuery<S>) -> S {
    if q.inside {
        q.dist_sq
    } else {
        -q.dist_sq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRI: [[f64; 2]; 3] = [[-0.5, -0.4], [0.6, -0.3], [0.0, 0.7]];

    #[test]
    fn signs_and_boundary() {
        let c = [(TRI[0][0] + TRI[1][0] + TRI[2][0]) / 3.0, (TRI[0][1] + TRI[1][1] + TRI[2][1]) / 3.0];
        assert!(signed_distance(c, TRI).unwrap() > 0.0);
        let mid = [(TRI[0][0] + TRI[1][0]) / 2.0, (TRI[0][1] + TRI[1][1]) / 2.0];
        assert!(signed_distance(mid, TRI).unwrap().abs() < 1e-9);
        // winding does not matter
        let rev = [TRI[2], TRI[1], TRI[0]];
        assert!((signed_distance(c, rev).unwrap() - signed_distance(c, TRI).unwrap()).abs() < 1e-15);
        assert!(signed_distance([0.0, 0.0], [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_none());
    }

    #[test]
    fn barycentrics_reconstruct_the_point() {
        let p = [0.1, 0.05];
        let q = query(p, TRI).unwrap();
        let x: f64 = (0..3).map(|i| q.bary[i] * TRI[i][0]).sum();
        let y: f64 = (0..3).map(|i| q.bary[i] * TRI[i][1]).sum();
        assert!((x - p[0]).abs() < 1e-14 && (y - p[1]).abs() < 1e-14);
        assert!((q.bary.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
}
