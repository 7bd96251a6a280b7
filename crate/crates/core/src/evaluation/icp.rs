//! Gradient-descent alignment with translation, continuous 6D rotation and
//! anisotropic scale, minimizing the squared Chamfer distance.

use serde::{Deserialize, Serialize};
use softmesh_tensor::{Adam, AdamConfig, Array, ParamStore, Tape, Var};

use super::chamfer::{chamfer_with, ChamferNorm, NearestNeighbors};
use crate::error::{invalid, Error, Result};
use crate::geometry::{cross, cross_rows, dot, normalize, scale, sub, Vec3};
use crate::model::rotation::{axis_angle, mat_vec, Mat3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    pub translation: Vec3,
    /// Two vectors orthonormalized into the first two rotation rows.
    pub rotation6: [f64; 6],
    pub scale: Vec3,
}

impl AlignmentParams {
    pub fn identity() -> Self {
        Self::from_rotation(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn from_rotation(r: &Mat3) -> Self {
        AlignmentParams {
            translation: [0.0; 3],
            rotation6: [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2]],
            scale: [1.0; 3],
        }
    }

    /// Gram-Schmidt of the two stored vectors; the third row is their cross
    /// product, so the result is always proper.
    pub fn rotation(&self) -> Mat3 {
        let r = &self.rotation6;
        let b1 = normalize([r[0], r[1], r[2]]);
        let a2 = [r[3], r[4], r[5]];
        let b2 = normalize(sub(a2, scale(b1, dot(b1, a2))));
        [b1, b2, cross(b1, b2)]
    }

    /// `R diag(s) x + t`.
    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = self.rotation();
        let q = mat_vec(&r, [p[0] * self.scale[0], p[1] * self.scale[1], p[2] * self.scale[2]]);
        [q[0] + self.translation[0], q[1] + self.translation[1], q[2] + self.translation[2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcpOptions {
    pub iterations: usize,
    pub lr: f64,
    /// Also start from 90°, 180° and 270° about the vertical axis.
    pub multi_start: bool,
}

impl Default for IcpOptions {
    fn default() -> Self {
        IcpOptions {
            iterations: 100,
            lr: 0.01,
            multi_start: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IcpResult {
    pub params: AlignmentParams,
    pub aligned: Vec<Vec3>,
    /// Objective (squared Chamfer) at the identity start.
    pub initial: f64,
    /// Objective of the returned parameters.
    pub best: f64,
    /// Objective at every evaluated iterate.
    pub history: Vec<f64>,
}

/// Gram-Schmidt rotation of a 6-vector on the tape, rows as in
/// [`AlignmentParams::rotation`].
pub fn rotation_tape(tape: &mut Tape, r6: Var) -> Result<Var> {
    let unit = |tape: &mut Tape, v: Var| -> Result<Var> {
        let sq = tape.square(v);
        let n = tape.sum(sq);
        let n = tape.sqrt(n);
        Ok(tape.div(v, n)?)
    };
    let a1 = tape.slice(r6, 0, 0, 3)?;
    let a2 = tape.slice(r6, 0, 3, 3)?;
    let b1 = unit(tape, a1)?;
    let p = tape.mul(b1, a2)?;
    let d = tape.sum(p);
    let proj = tape.mul(b1, d)?;
    let u = tape.sub(a2, proj)?;
    let b2 = unit(tape, u)?;
    let b1 = tape.reshape(b1, &[1, 3])?;
    let b2 = tape.reshape(b2, &[1, 3])?;
    let b3 = cross_rows(tape, b1, b2)?;
    Ok(tape.concat(&[b1, b2, b3], 0)?)
}

fn points_array(points: &[Vec3]) -> Array {
    Array::new([points.len(), 3], points.iter().flatten().copied().collect()).expect("shape")
}

fn transform(params: &AlignmentParams, points: &[Vec3]) -> Vec<Vec3> {
    points.iter().map(|&p| params.apply(p)).collect()
}

fn run(source: &[Vec3], target: &[Vec3], target_nn: &NearestNeighbors, start: AlignmentParams, opts: &IcpOptions) -> Result<IcpResult> {
    let mut store = ParamStore::new();
    let tid = store.add("translation", "icp", Array::from_vec(start.translation.to_vec()))?;
    let rid = store.add("rotation6", "icp", Array::from_vec(start.rotation6.to_vec()))?;
    let sid = store.add("scale", "icp", Array::from_vec(start.scale.to_vec()))?;
    let mut adam = Adam::new(AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    });
    let src = points_array(source);
    let tgt = points_array(target);
    let read = |store: &ParamStore| {
        let v = |id| store.get(id).value.data().to_vec();
        let (t, r, s) = (v(tid), v(rid), v(sid));
        AlignmentParams {
            translation: [t[0], t[1], t[2]],
            rotation6: [r[0], r[1], r[2], r[3], r[4], r[5]],
            scale: [s[0], s[1], s[2]],
        }
    };
    let mut best = (f64::INFINITY, start);
    let mut history = Vec::with_capacity(opts.iterations + 1);
    for it in 0..=opts.iterations {
        let params = read(&store);
        let aligned = transform(&params, source);
        let aligned_nn = NearestNeighbors::new(&aligned)?;
        let fwd: Vec<usize> = aligned.iter().map(|p| target_nn.nearest(p).0).collect();
        let bwd: Vec<usize> = target.iter().map(|p| aligned_nn.nearest(p).0).collect();

        let mut tape = Tape::new();
        let bound = store.bind_all(&mut tape);
        let x = tape.constant(src.clone());
        let s = tape.mul(x, bound.var(sid))?;
        let r = rotation_tape(&mut tape, bound.var(rid))?;
        let rt = tape.transpose(r)?;
        let y = tape.matmul(s, rt)?;
        let y = tape.add(y, bound.var(tid))?;
        let t = tape.constant(tgt.clone());
        let matched_t = tape.gather(t, &fwd)?;
        let d1 = tape.sub(y, matched_t)?;
        let d1 = tape.square(d1);
        let d1 = tape.sum_axis(d1, 1)?;
        let d1 = tape.mean(d1);
        let matched_y = tape.gather(y, &bwd)?;
        let d2 = tape.sub(t, matched_y)?;
        let d2 = tape.square(d2);
        let d2 = tape.sum_axis(d2, 1)?;
        let d2 = tape.mean(d2);
        let sum = tape.add(d1, d2)?;
        let loss = tape.scale(sum, 0.5);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::IcpDiverged(it));
        }
        history.push(value);
        if value < best.0 {
            best = (value, params);
        }
        if it == opts.iterations {
            break;
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut store, &bound, &grads).map_err(|_| Error::IcpDiverged(it))?;
    }
    let params = best.1;
    Ok(IcpResult {
        aligned: transform(&params, source),
        params,
        initial: history[0],
        best: best.0,
        history,
    })
}

/// Aligns `source` onto `target`. The returned parameters are the best
/// iterate, which includes the starting identity.
pub fn icp_align(source: &[Vec3], target: &[Vec3], opts: &IcpOptions) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(invalid("alignment of an empty point cloud"));
    }
    let target_nn = NearestNeighbors::new(target)?;
    let mut result = run(source, target, &target_nn, AlignmentParams::identity(), opts)?;
    if opts.multi_start {
        for k in 1..4 {
            let r = axis_angle([0.0, 1.0, 0.0], k as f64 * std::f64::consts::FRAC_PI_2);
            let other = run(source, target, &target_nn, AlignmentParams::from_rotation(&r), opts)?;
            if other.best < result.best {
                result = IcpResult {
                    initial: result.initial,
                    ..other
                };
            }
        }
    }
    // the plain objective of the chosen parameters, recomputed outside the tape
    let aligned_nn = NearestNeighbors::new(&result.aligned)?;
    result.best = chamfer_with(&result.aligned, &aligned_nn, target, &target_nn, ChamferNorm::Squared);
    Ok(result)
}
