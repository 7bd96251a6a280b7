//! Encoder backbone, perceptron heads, deformation field and image
//! generators.

use rand::Rng;
use softmesh_tensor::nn::{global_avg_pool, upsample2x, Conv2d, Linear, Mlp};
use softmesh_tensor::{Array, Bound, ParamId, ParamStore, Tape, Var};

use crate::error::Result;

const LEAK: f64 = 0.2;

/// Stride-2 3×3 convolutions with leaky ReLU, then global average pooling.
#[derive(Clone, Debug)]
pub struct Backbone {
    convs: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, channels: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut convs = Vec::with_capacity(channels.len());
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), name, cin, c, 2, rng)?);
            cin = c;
        }
        Ok(Backbone { convs })
    }

    pub fn features(&self) -> usize {
        self.convs.last().map(|c| c.out_channels).unwrap_or(3)
    }

    /// `[B, 3, H, W] -> [B, features]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        for c in &self.convs {
            x = c.forward(tape, bound, x)?;
            x = tape.leaky_relu(x, LEAK);
        }
        Ok(global_avg_pool(tape, x)?)
    }
}

/// Perceptron with `hidden` layers of `width` units.
pub fn head(
    store: &mut ParamStore,
    name: &str,
    inputs: usize,
    width: usize,
    hidden: usize,
    outputs: usize,
    rng: &mut impl Rng,
) -> Result<Mlp> {
    let mut widths = vec![inputs];
    widths.extend(std::iter::repeat_n(width, hidden));
    widths.push(outputs);
    Ok(Mlp::new(store, name, name, &widths, true, rng)?)
}

/// Per-vertex displacement `s(x, z)`. The first layer is split into its
/// position and code parts so the position product is shared by a batch.
#[derive(Clone, Debug)]
pub struct DeformNet {
    first: ParamId,
    first_bias: ParamId,
    code_dim: usize,
    rest: Mlp,
}

pub const DEFORM_GROUP: &str = "deform";

impl DeformNet {
    pub fn new(store: &mut ParamStore, code_dim: usize, width: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = 3 + code_dim;
        let b = (6.0 / fan_in as f64).sqrt();
        let w = Array::new(
            [fan_in, width],
            (0..fan_in * width).map(|_| rng.random_range(-b..=b)).collect(),
        )?;
        let first = store.add("deform.in.weight", DEFORM_GROUP, w)?;
        let first_bias = store.add("deform.in.bias", DEFORM_GROUP, Array::zeros([width]))?;
        let mut widths = vec![width; hidden.max(1)];
        widths.push(3);
        let rest = Mlp::new(store, "deform", DEFORM_GROUP, &widths, true, rng)?;
        Ok(DeformNet {
            first,
            first_bias,
            code_dim,
            rest,
        })
    }

    /// Displacements `[N, 3]` for each row of `codes` (`[B, code_dim]`).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, points: Var, codes: Var) -> Result<Vec<Var>> {
        let w = bound.var(self.first);
        let wx = tape.slice(w, 0, 0, 3)?;
        let xw = tape.matmul(points, wx)?;
        let xw = tape.add(xw, bound.var(self.first_bias))?;
        let batch = tape.shape(codes)[0];
        let zw = if self.code_dim > 0 {
            let wz = tape.slice(w, 0, 3, self.code_dim)?;
            Some(tape.matmul(codes, wz)?)
        } else {
            None
        };
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let h = match zw {
                Some(zw) => {
                    let row = tape.slice(zw, 0, b, 1)?;
                    tape.add(xw, row)?
                }
                None => xw,
            };
            let h = tape.relu(h);
            out.push(self.rest.forward(tape, bound, h)?);
        }
        Ok(out)
    }
}

/// Code -> 4×4 seed -> upsample+conv blocks -> sigmoid RGB image.
#[derive(Clone, Debug)]
pub struct Generator {
    fc: Linear,
    blocks: Vec<Conv2d>,
    out: Conv2d,
    channels: usize,
    pub size: usize,
}

impl Generator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        code_dim: usize,
        channels: usize,
        size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fc = Linear::new(store, &format!("{name}.fc"), name, code_dim.max(1), channels * 16, false, rng)?;
        let n_blocks = (size / 4).trailing_zeros() as usize;
        let blocks = (0..n_blocks)
            .map(|i| Conv2d::new(store, &format!("{name}.block{i}"), name, channels, channels, 1, rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let out = Conv2d::new(store, &format!("{name}.out"), name, channels, 3, 1, rng)?;
        Ok(Generator {
            fc,
            blocks,
            out,
            channels,
            size,
        })
    }

    /// `[B, D] -> [B, size, size, 3]` with values in (0, 1).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, codes: Var) -> Result<Var> {
        let batch = tape.shape(codes)[0];
        let codes = if tape.shape(codes)[1] == 0 {
            tape.constant(Array::zeros([batch, 1]))
        } else {
            codes
        };
        let h = self.fc.forward(tape, bound, codes)?;
        let mut x = tape.reshape(h, &[batch, self.channels, 4, 4])?;
        x = tape.leaky_relu(x, LEAK);
        for b in &self.blocks {
            x = upsample2x(tape, x)?;
            x = b.forward(tape, bound, x)?;
            x = tape.leaky_relu(x, LEAK);
        }
        let x = self.out.forward(tape, bound, x)?;
        let x = tape.sigmoid(x);
        Ok(softmesh_tensor::nn::permute(tape, x, &[0, 2, 3, 1])?)
    }
}
