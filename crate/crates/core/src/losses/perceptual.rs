//! Feature extractors for the perceptual term.

use softmesh_tensor::nn::permute;
use softmesh_tensor::{Array, Tape, Var};

use crate::error::Result;

/// Maps an `[H, W, 3]` image node to feature maps. Plug a learned network in
/// by implementing this trait.
pub trait FeatureExtractor {
    fn features(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>>;
}

/// Gaussian pyramid: the image followed by `levels - 1` successive
/// blur-and-halve steps with the 5-tap binomial kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinomialPyramid {
    pub levels: usize,
}

impl Default for BinomialPyramid {
    fn default() -> Self {
        BinomialPyramid { levels: 3 }
    }
}

pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// `[n / 2, n]` matrix that blurs with [`BINOMIAL5`] (edge samples repeated)
/// and keeps every other sample.
pub fn reduce_matrix(n: usize) -> Array {
    let m = n.div_ceil(2);
    let mut a = Array::zeros([m, n]);
    for i in 0..m {
        let centre = 2 * i as isize;
        for (t, w) in BINOMIAL5.iter().enumerate() {
            let j = (centre + t as isize - 2).clamp(0, n as isize - 1) as usize;
            a.data_mut()[i * n + j] += w;
        }
    }
    a
}

/// One pyramid step on an `[H, W, C]` node.
pub fn reduce(tape: &mut Tape, image: Var) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let ah = tape.constant(reduce_matrix(h));
    let x = tape.reshape(image, &[h, w * c])?;
    let x = tape.matmul(ah, x)?;
    let h2 = h.div_ceil(2);
    let x = tape.reshape(x, &[h2, w, c])?;
    let x = permute(tape, x, &[1, 0, 2])?;
    let x = tape.reshape(x, &[w, h2 * c])?;
    let aw = tape.constant(reduce_matrix(w));
    let x = tape.matmul(aw, x)?;
    let x = tape.reshape(x, &[w.div_ceil(2), h2, c])?;
    Ok(permute(tape, x, &[1, 0, 2])?)
}

impl FeatureExtractor for BinomialPyramid {
    fn features(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let mut out = vec![image];
        for _ in 1..self.levels.max(1) {
            let next = reduce(tape, *out.last().expect("non-empty"))?;
            out.push(next);
        }
        Ok(out)
    }
}
