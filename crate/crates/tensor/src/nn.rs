//! Small network building blocks on top of the tape.
//!
//! Image tensors use `[batch, channels, height, width]` layout.

use rand::Rng;

use crate::array::Array;
use crate::error::{invalid, Result, TensorError};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{matmul_raw, transpose_raw, CustomOp, Tape, Var};

fn uniform_init(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// He-uniform weights; `zero` gives an all-zero layer.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        inputs: usize,
        outputs: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = if zero {
            Array::zeros([inputs, outputs])
        } else {
            uniform_init(rng, &[inputs, outputs], (6.0 / inputs.max(1) as f64).sqrt())
        };
        let weight = store.add(&format!("{name}.weight"), group, w)?;
        let bias = store.add(&format!("{name}.bias"), group, Array::zeros([outputs]))?;
        Ok(Linear {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    /// `[batch, inputs] -> [batch, outputs]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        tape.add(y, bound.var(self.bias))
    }
}

/// Perceptron with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer size including input and output. The last
    /// layer starts at zero when `zero_last` is set.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        widths: &[usize],
        zero_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid("mlp", "needs at least input and output widths"));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    group,
                    widths[i],
                    widths[i + 1],
                    zero_last && i == n - 1,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, bound, x)?;
            if i + 1 < n {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }
}

/// 3x3 convolution with zero padding 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * 9;
        let w = uniform_init(rng, &[out_channels, fan_in], (6.0 / fan_in as f64).sqrt());
        let weight = store.add(&format!("{name}.weight"), group, w)?;
        let bias = store.add(&format!("{name}.bias"), group, Array::zeros([out_channels]))?;
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        conv3x3(tape, x, bound.var(self.weight), bound.var(self.bias), self.stride)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl ConvGeom {
    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let (cin, h, w, ho, wo, s) = (self.cin, self.h, self.w, self.ho, self.wo, self.stride);
        let mut col = vec![0.0; cin * 9 * ho * wo];
        for c in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (c * 9 + ky * 3 + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[row + oy * wo + ox] = img[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let (cin, h, w, ho, wo, s) = (self.cin, self.h, self.w, self.ho, self.wo, self.stride);
        for c in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (c * 9 + ky * 3 + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            img[(c * h + iy as usize) * w + ix as usize] += col[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    geom: ConvGeom,
}

impl CustomOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let g = self.geom;
        let (x, w) = (inputs[0], inputs[1]);
        let k = g.cin * 9;
        let plane = g.ho * g.wo;
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; g.cout];
        let wt = transpose_raw(w.data(), g.cout, k);
        let in_size = g.cin * g.h * g.w;
        for b in 0..g.batch {
            let gb = &grad.data()[b * g.cout * plane..(b + 1) * g.cout * plane];
            for (o, dbo) in db.iter_mut().enumerate() {
                *dbo += gb[o * plane..(o + 1) * plane].iter().sum::<f64>();
            }
            let col = g.im2col(&x.data()[b * in_size..(b + 1) * in_size]);
            let colt = transpose_raw(&col, k, plane);
            let dwb = matmul_raw(gb, &colt, g.cout, plane, k);
            for (a, v) in dw.iter_mut().zip(dwb) {
                *a += v;
            }
            let dcol = matmul_raw(&wt, gb, k, g.cout, plane);
            g.col2im(&dcol, &mut dx[b * in_size..(b + 1) * in_size]);
        }
        vec![
            Some(Array::new(x.shape().to_vec(), dx).unwrap()),
            Some(Array::new(w.shape().to_vec(), dw).unwrap()),
            Some(Array::new([g.cout], db).unwrap()),
        ]
    }
}

/// 3x3 convolution, padding 1. `x: [B, C, H, W]`, `weight: [O, C*9]`, `bias: [O]`.
pub fn conv3x3(tape: &mut Tape, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] * 9 || tape.shape(bias) != [ws[0]] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs,
            rhs: ws,
        });
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be positive"));
    }
    let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let ho = (h + 2 - 3) / stride + 1;
    let wo = (w + 2 - 3) / stride + 1;
    let geom = ConvGeom {
        batch,
        cin,
        h,
        w,
        cout: ws[0],
        ho,
        wo,
        stride,
    };
    let plane = ho * wo;
    let xv = tape.value(x).data();
    let wv = tape.value(weight).data();
    let bv = tape.value(bias).data();
    let mut out = Vec::with_capacity(batch * geom.cout * plane);
    for b in 0..batch {
        let col = geom.im2col(&xv[b * cin * h * w..(b + 1) * cin * h * w]);
        let mut y = matmul_raw(wv, &col, geom.cout, cin * 9, plane);
        for o in 0..geom.cout {
            for v in &mut y[o * plane..(o + 1) * plane] {
                *v += bv[o];
            }
        }
        out.extend(y);
    }
    let value = Array::new([batch, geom.cout, ho, wo], out)?;
    Ok(tape.custom(&[x, weight, bias], value, Box::new(Conv2dOp { geom })))
}

struct Upsample2xOp;

impl CustomOp for Upsample2xOp {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let s = inputs[0].shape();
        let (h, w) = (s[2], s[3]);
        let w2 = output.shape()[3];
        let mut dx = vec![0.0; inputs[0].len()];
        for (p, plane) in dx.chunks_mut(h * w).enumerate() {
            let gp = &grad.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..w2 {
                    plane[(y / 2) * w + x / 2] += gp[y * w2 + x];
                }
            }
        }
        vec![Some(Array::new(s.to_vec(), dx).unwrap())]
    }
}

/// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
pub fn upsample2x(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(invalid("upsample2x", format!("expects [B,C,H,W], got {:?}", s)));
    }
    let (h, w) = (s[2], s[3]);
    let mut out = Vec::with_capacity(tape.value(x).len() * 4);
    for plane in tape.value(x).data().chunks(h * w) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.push(plane[(y / 2) * w + xx / 2]);
            }
        }
    }
    let v = Array::new([s[0], s[1], 2 * h, 2 * w], out)?;
    Ok(tape.custom(&[x], v, Box::new(Upsample2xOp)))
}

/// `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(invalid("global_avg_pool", format!("expects [B,C,H,W], got {:?}", s)));
    }
    let r = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.mean_axis(r, 2)
}

struct PermuteOp {
    inverse: Vec<usize>,
}

fn permute_array(a: &Array, perm: &[usize]) -> Array {
    let src = a.shape();
    let n = src.len();
    let dst: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let mut src_strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(a.len());
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..a.len() {
        out.push(a.data()[off]);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < dst[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Array::new(dst, out).unwrap()
}

impl CustomOp for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, _inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        vec![Some(permute_array(grad, &self.inverse))]
    }
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(tape: &mut Tape, x: Var, perm: &[usize]) -> Result<Var> {
    let n = tape.shape(x).len();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(invalid("permute", format!("{:?} is not a permutation of {n} axes", perm)));
    }
    let mut inverse = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let v = permute_array(tape.value(x), perm);
    Ok(tape.custom(&[x], v, Box::new(PermuteOp { inverse })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_stride2_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", "enc", 3, 8, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = store.bind_all(&mut tape);
        let x = tape.leaf(Array::ones([2, 3, 16, 16]));
        let y = conv.forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 8, 8, 8]);
    }

    #[test]
    fn conv_identity_kernel() {
        // centre tap of a single-channel kernel copies the input
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.leaf(Array::new([1, 1, 4, 4], data.clone()).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.leaf(Array::new([1, 9], k).unwrap());
        let b = tape.leaf(Array::zeros([1]));
        let y = conv3x3(&mut tape, x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn upsample_then_pool_preserves_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::new([1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap());
        let u = upsample2x(&mut tape, x).unwrap();
        assert_eq!(tape.shape(u), &[1, 2, 4, 4]);
        let p = global_avg_pool(&mut tape, u).unwrap();
        assert_eq!(tape.value(p).data(), &[1.5, 5.5]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::new();
        let a = Array::new([2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let x = tape.leaf(a.clone());
        let p = permute(&mut tape, x, &[1, 2, 0]).unwrap();
        assert_eq!(tape.shape(p), &[3, 4, 2]);
        // out[i][j][k] = in[k][i][j]
        assert_eq!(tape.value(p).data()[1], a.data()[12]);
        let q = permute(&mut tape, p, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(q), &a);
        assert!(permute(&mut tape, x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "head", "shape", &[5, 16, 16, 4], true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = store.bind_all(&mut tape);
        let x = tape.leaf(Array::full([3, 5], 0.7));
        let y = mlp.forward(&mut tape, &b, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
