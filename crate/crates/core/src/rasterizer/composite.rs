//! Per-pixel layer stacks and the two ways of merging them.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer {
    pub face: usize,
    pub occupancy: f64,
    pub color: [f64; 3],
    /// Camera-space depth used for ordering (and by the baseline's weights).
    pub depth: f64,
}

/// Face layers of every pixel, front to back, plus the background that
/// acts as a final fully opaque layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub width: usize,
    pub height: usize,
    /// Row-major, `width * height` entries.
    pub pixels: Vec<Vec<Layer>>,
    pub background: Vec<[f64; 3]>,
}

/// Parameters of the depth-softmax aggregation used as the baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftRasParams {
    pub gamma: f64,
    pub near: f64,
    pub far: f64,
    /// Normalized depth given to the background, (far - d_bg) / (far - near).
    pub epsilon: f64,
}

impl Default for SoftRasParams {
    fn default() -> Self {
        SoftRasParams {
            gamma: 1e-4,
            near: 1.0,
            far: 100.0,
            epsilon: 1e-3,
        }
    }
}

impl SoftRasParams {
    /// Normalized inverse depth, 1 at the near plane and 0 at the far one.
    pub fn normalized_depth(&self, z: f64) -> f64 {
        (self.far - z) / (self.far - self.near)
    }
}

/// Compositing weights of each face layer followed by the background:
/// `prod_{k<l}(1 - O_k) * O_l`, with the background's `O = 1`.
pub fn layered_weights(occupancy: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(occupancy.len() + 1);
    let mut t = 1.0;
    for &o in occupancy {
        w.push(t * o);
        t *= 1.0 - o;
    }
    w.push(t);
    w
}

/// Depth-softmax weights `O_j exp(D_j / gamma)` and `exp(eps / gamma)` for
/// the background, normalized. Computed relative to the largest exponent so
/// nothing overflows. Returns the weights and the unnormalized exponentials
/// `exp((D_j - m) / gamma)` (background last) with their normalizer.
pub fn sr_weights(occupancy: &[f64], depth: &[f64], p: &SoftRasParams) -> (Vec<f64>, Vec<f64>, f64) {
    let d: Vec<f64> = depth.iter().map(|&z| p.normalized_depth(z)).collect();
    let m = d.iter().copied().fold(p.epsilon, f64::max);
    let mut e: Vec<f64> = d.iter().map(|&x| ((x - m) / p.gamma).exp()).collect();
    e.push(((p.epsilon - m) / p.gamma).exp());
    let mut w: Vec<f64> = occupancy.iter().zip(&e).map(|(o, e)| o * e).collect();
    w.push(*e.last().unwrap());
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    (w, e, total)
}

fn blend(weights: &[f64], layers: &[Layer], bg: [f64; 3]) -> ([f64; 3], f64) {
    let mut c = [0.0; 3];
    for (w, l) in weights.iter().zip(layers) {
        for k in 0..3 {
            c[k] += w * l.color[k];
        }
    }
    let wb = *weights.last().unwrap();
    for k in 0..3 {
        c[k] += wb * bg[k];
    }
    (c, 1.0 - wb)
}

/// Front-to-back alpha compositing; returns colors and masks per pixel.
pub fn composite_layered(stack: &LayerStack) -> (Vec<[f64; 3]>, Vec<f64>) {
    stack
        .pixels
        .iter()
        .zip(&stack.background)
        .map(|(layers, &bg)| {
            let o: Vec<f64> = layers.iter().map(|l| l.occupancy).collect();
            blend(&layered_weights(&o), layers, bg)
        })
        .unzip()
}

pub fn composite_sr(stack: &LayerStack, p: &SoftRasParams) -> (Vec<[f64; 3]>, Vec<f64>) {
    stack
        .pixels
        .iter()
        .zip(&stack.background)
        .map(|(layers, &bg)| {
            let o: Vec<f64> = layers.iter().map(|l| l.occupancy).collect();
            let z: Vec<f64> = layers.iter().map(|l| l.depth).collect();
            blend(&sr_weights(&o, &z, p).0, layers, bg)
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(o: f64, c: [f64; 3], depth: f64) -> LayerStack {
        LayerStack {
            width: 1,
            height: 1,
            pixels: vec![vec![Layer {
                face: 0,
                occupancy: o,
                color: c,
                depth,
            }]],
            background: vec![[0.0, 0.2, 1.0]],
        }
    }

    #[test]
    fn two_layer_blends() {
        let (c, m) = composite_layered(&one(1.0, [0.3, 0.4, 0.5], 2.0));
        assert_eq!((c[0], m[0]), ([0.3, 0.4, 0.5], 1.0));
        let (c, m) = composite_layered(&one(0.5, [1.0, 1.0, 1.0], 2.0));
        assert_eq!((c[0], m[0]), ([0.5, 0.6, 1.0], 0.5));
    }

    #[test]
    fn weights_telescope_to_one() {
        let w = layered_weights(&[0.3, 0.9, 0.01, 0.5]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let (w, _, _) = sr_weights(&[0.3, 0.9], &[2.0, 50.0], &SoftRasParams::default());
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softras_hides_the_background_behind_a_faint_face() {
        // a barely-there face still wins once its normalized depth exceeds
        // the background's by a few gamma
        let p = SoftRasParams::default();
        let z = p.far - 5e-3 * (p.far - p.near);
        let (c, _) = composite_sr(&one(4e-4, [1.0, 0.0, 0.0], z), &p);
        assert!((c[0][0] - 1.0).abs() < 1e-2 && c[0][2] < 1e-2);
        let (c, _) = composite_layered(&one(4e-4, [1.0, 0.0, 0.0], z));
        assert!(c[0][2] > 0.99);
    }
}
