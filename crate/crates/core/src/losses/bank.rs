//! Memory bank of recent encodings and the neighbor reconstruction loss.

use std::collections::VecDeque;

use rand::Rng;
use softmesh_tensor::{Array, Bound, Tape, Var};

use super::{rec_loss, FeatureExtractor};
use crate::error::{Error, Result};
use crate::model::{geodesic_angle, Conditioning, Instance, LatentBatch, Mat3, SceneModel, Source};
use crate::rasterizer::Renderer;

pub const DEFAULT_CAPACITY: usize = 1024;
pub const BIN_START_DEG: f64 = 20.0;
pub const BIN_END_DEG: f64 = 180.0;
pub const NUM_BINS: usize = 5;

/// One stored encoding. Codes are only used to search; the loss re-encodes
/// `image` (or `row`) with the current weights.
#[derive(Clone, Debug)]
pub struct BankEntry {
    /// `[H, W, 3]`.
    pub image: Array,
    /// Dataset row for auto-decoder models.
    pub row: Option<usize>,
    pub z_sh: Vec<f64>,
    pub z_tx: Vec<f64>,
    pub z_bg: Option<Vec<f64>>,
    /// Selected candidate's rotation.
    pub rotation: Mat3,
}

/// FIFO ring buffer.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn push(&mut self, entry: BankEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &BankEntry {
        &self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Texture,
    Shape,
}

/// Bin of a relative viewpoint angle: five 32° bins over [20°, 180°].
/// Angles under 20° have no bin.
pub fn viewpoint_bin(angle_deg: f64) -> Option<usize> {
    if !(BIN_START_DEG..=BIN_END_DEG + 1e-9).contains(&angle_deg) {
        return None;
    }
    let width = (BIN_END_DEG - BIN_START_DEG) / NUM_BINS as f64;
    Some((((angle_deg - BIN_START_DEG) / width) as usize).min(NUM_BINS - 1))
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Samples a viewpoint bin and returns the bank entry in it whose code is
/// nearest to `code`. `Ok(None)` means no entry is at least 20° away.
pub fn select_neighbor(
    rotation: &Mat3,
    code: &[f64],
    bank: &MemoryBank,
    space: Space,
    rng: &mut impl Rng,
) -> Result<Option<usize>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); NUM_BINS];
    for (i, e) in bank.iter().enumerate() {
        if let Some(b) = viewpoint_bin(geodesic_angle(rotation, &e.rotation).to_degrees()) {
            bins[b].push(i);
        }
    }
    let mut bin = rng.random_range(0..NUM_BINS);
    if bins[bin].is_empty() {
        let full: Vec<usize> = (0..NUM_BINS).filter(|&b| !bins[b].is_empty()).collect();
        if full.is_empty() {
            return Ok(None);
        }
        bin = full[rng.random_range(0..full.len())];
    }
    let key = |i: usize| {
        let e = bank.get(i);
        let c = match space {
            Space::Texture => &e.z_tx,
            Space::Shape => &e.z_sh,
        };
        dist_sq(code, c)
    };
    let mut best = bins[bin][0];
    let mut best_d = key(best);
    for &i in &bins[bin][1..] {
        let d = key(i);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(Some(best))
}

/// Result of [`neighbor_loss`] for one input.
#[derive(Clone, Copy, Debug)]
pub struct NeighborOutcome {
    pub loss: Option<Var>,
    /// Swap terms skipped because no entry was far enough away.
    pub skipped: usize,
}

/// Everything about the input needed for the swap.
pub struct NeighborQuery<'a> {
    pub latents: &'a LatentBatch,
    pub item: usize,
    pub candidate: usize,
    pub rotation: Mat3,
}

fn row_values(tape: &Tape, v: Var, b: usize) -> Vec<f64> {
    let d = tape.shape(v)[1];
    tape.value(v).data()[b * d..(b + 1) * d].to_vec()
}

/// Sum of the texture-swap and shape-swap reconstruction losses against
/// the neighbors' images. Neighbors are re-encoded with the current weights.
#[allow(clippy::too_many_arguments)]
pub fn neighbor_loss(
    tape: &mut Tape,
    bound: &Bound,
    model: &SceneModel,
    renderer: &Renderer,
    query: &NeighborQuery,
    bank: &MemoryBank,
    cond: Conditioning,
    averaged: bool,
    features: &dyn FeatureExtractor,
    perc_weight: f64,
    rng: &mut impl Rng,
) -> Result<NeighborOutcome> {
    let lat = query.latents;
    let own = lat.instance(tape, query.item, query.candidate)?;
    let z_tx = row_values(tape, lat.z_tx, query.item);
    let z_sh = row_values(tape, lat.z_sh, query.item);
    let m_t = select_neighbor(&query.rotation, &z_tx, bank, Space::Texture, rng)?;
    let m_s = select_neighbor(&query.rotation, &z_sh, bank, Space::Shape, rng)?;
    let mut skipped = 0;
    let mut terms = Vec::new();
    for (m, space) in [(m_t, Space::Texture), (m_s, Space::Shape)] {
        let Some(m) = m else {
            skipped += 1;
            continue;
        };
        let entry = bank.get(m);
        let other = reencode(tape, bound, model, entry, cond)?;
        let swapped = match space {
            Space::Texture => Instance { z_tx: own.z_tx, ..other },
            Space::Shape => Instance {
                z_sh: own.z_sh,
                ..other
            },
        };
        let (r, _) = model.render_instance(tape, bound, renderer, &swapped, cond, averaged)?;
        let img = r.image(tape)?;
        let target = tape.constant(entry.image.clone());
        terms.push(rec_loss(tape, target, img, features, perc_weight)?.total);
    }
    let loss = match terms.len() {
        0 => None,
        1 => Some(terms[0]),
        _ => Some(tape.add(terms[0], terms[1])?),
    };
    Ok(NeighborOutcome { loss, skipped })
}

fn reencode(tape: &mut Tape, bound: &Bound, model: &SceneModel, entry: &BankEntry, cond: Conditioning) -> Result<Instance> {
    let lat = match entry.row {
        Some(r) => model.encode(tape, bound, Source::Rows(&[r]), cond)?,
        None => {
            let s = entry.image.shape();
            let batch = entry.image.clone().reshape([1, s[0], s[1], s[2]])?;
            model.encode(tape, bound, Source::Images(&batch), cond)?
        }
    };
    let k = lat.selected(tape)[0];
    lat.instance(tape, 0, k)
}
