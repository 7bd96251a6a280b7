//! Bilinear UV lookup: wraps in u, clamps in v. Texture images are
//! `[height, width, 3]` with row 0 at v = 1.

use super::jet::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct TextureView<'a> {
    pub height: usize,
    pub width: usize,
    pub data: &'a [f64],
}

/// Four texel indices (pixel offsets, not channel offsets) with weights.
pub type Taps<S> = [(usize, S); 4];

impl<'a> TextureView<'a> {
    pub fn new(height: usize, width: usize, data: &'a [f64]) -> Self {
        assert_eq!(data.len(), height * width * 3);
        TextureView { height, width, data }
    }

    pub fn taps<S: Scalar>(&self, u: S, v: S) -> Taps<S> {
        let (w, h) = (self.width, self.height);
        let x = u * w as f64 + (-0.5);
        let x0 = x.floor_val();
        let fx = x + (-x0);
        let i0 = (x0 as i64).rem_euclid(w as i64) as usize;
        let i1 = (i0 + 1) % w;

        let y = (-v + 1.0) * h as f64 + (-0.5);
        let y = y.clamp(0.0, (h - 1) as f64);
        let y0 = y.floor_val().min((h.max(2) - 2) as f64).max(0.0);
        let fy = if h == 1 { S::cst(0.0) } else { y + (-y0) };
        let j0 = y0 as usize;
        let j1 = (j0 + 1).min(h - 1);

        let one = S::cst(1.0);
        [
            (j0 * w + i0, (one - fx) * (one - fy)),
            (j0 * w + i1, fx * (one - fy)),
            (j1 * w + i0, (one - fx) * fy),
            (j1 * w + i1, fx * fy),
        ]
    }

    pub fn texel(&self, index: usize) -> [f64; 3] {
        let o = 3 * index;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn sample<S: Scalar>(&self, u: S, v: S) -> [S; 3] {
        let taps = self.taps(u, v);
        let mut out = [S::cst(0.0); 3];
        for (i, w) in taps {
            let t = self.texel(i);
            for c in 0..3 {
                out[c] = out[c] + w * t[c];
            }
        }
        out
    }
}

/// Texture coordinates of texel (column, row)'s center.
pub fn texel_center_uv(width: usize, height: usize, col: usize, row: usize) -> [f64; 2] {
    [
        (col as f64 + 0.5) / width as f64,
        1.0 - (row as f64 + 0.5) / height as f64,
    ]
}
