//! Training objectives.

pub mod bank;
pub mod perceptual;

use serde::{Deserialize, Serialize};
use softmesh_tensor::{Tape, Var};

pub use bank::{neighbor_loss, select_neighbor, viewpoint_bin, BankEntry, MemoryBank, NeighborOutcome, NeighborQuery, Space};
pub use perceptual::{BinomialPyramid, FeatureExtractor};

use crate::error::{invalid, Result};
use crate::geometry::{laplacian_loss_tape, normal_consistency_loss_tape, MeshTopology};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub nbr: f64,
    pub reg: f64,
    pub perc: f64,
    pub uni: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            nbr: 1.0,
            reg: 0.01,
            perc: 10.0,
            uni: 0.02,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.nbr, self.reg, self.perc, self.uni].iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// The two parts of the reconstruction loss and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct RecLoss {
    pub total: Var,
    pub pix: Var,
    pub perc: Var,
}

fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.square(d);
    Ok(tape.mean(d))
}

/// `L_pix + λ_perc L_perc` between two `[H, W, 3]` images. The perceptual
/// part averages the squared feature differences over the feature maps.
pub fn rec_loss(
    tape: &mut Tape,
    target: Var,
    rendered: Var,
    features: &dyn FeatureExtractor,
    perc_weight: f64,
) -> Result<RecLoss> {
    if tape.shape(target) != tape.shape(rendered) {
        return Err(invalid(format!(
            "reconstruction between shapes {:?} and {:?}",
            tape.shape(target),
            tape.shape(rendered)
        )));
    }
    let pix = mse(tape, target, rendered)?;
    let ft = features.features(tape, target)?;
    let fr = features.features(tape, rendered)?;
    let mut terms = Vec::with_capacity(ft.len());
    for (a, b) in ft.into_iter().zip(fr) {
        terms.push(mse(tape, a, b)?);
    }
    let perc = if terms.is_empty() {
        tape.scalar(0.0)
    } else {
        let s = tape.stack(&terms)?;
        tape.mean(s)
    };
    let weighted = tape.scale(perc, perc_weight);
    let total = tape.add(pix, weighted)?;
    Ok(RecLoss { total, pix, perc })
}

/// `L_norm + L_lap` of object-space vertices.
pub fn mesh_regularization(tape: &mut Tape, verts: Var, topo: &MeshTopology) -> Result<Var> {
    let n = normal_consistency_loss_tape(tape, verts, topo)?;
    let l = laplacian_loss_tape(tape, verts, topo)?;
    Ok(tape.add(n, l)?)
}

/// The 3D-step objective. The neighbor term is dropped in stage 1.
pub fn l3d(tape: &mut Tape, rec: Var, nbr: Option<Var>, reg: Var, stage: usize, w: &LossWeights) -> Result<Var> {
    let r = tape.scale(reg, w.reg);
    let mut total = tape.add(rec, r)?;
    if let (Some(n), true) = (nbr, stage > 1) {
        let n = tape.scale(n, w.nbr);
        total = tape.add(total, n)?;
    }
    Ok(total)
}

/// `Σ_k |mean_b p_bk - 1/K|` for `[B, K]` probabilities.
pub fn uniformity_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    let k = tape.shape(probs)[1];
    let mean = tape.mean_axis(probs, 0)?;
    let d = tape.add_scalar(mean, -1.0 / k as f64);
    let d = tape.abs(d);
    Ok(tape.sum(d))
}
