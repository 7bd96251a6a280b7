//! Alternating 3D-step / P-step optimization with progressive conditioning.

pub mod schedule;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use softmesh_tensor::{checkpoint, Adam, AdamConfig, Array, Bound, Tape, Var};

pub use schedule::{Milestones, StageEvent, StageScheduler, NUM_STAGES};

use crate::error::{invalid, Error, Result};
use crate::geometry::MeshTopology;
use crate::losses::bank::NeighborQuery;
use crate::losses::{
    l3d, mesh_regularization, neighbor_loss, rec_loss, uniformity_loss, BankEntry, BinomialPyramid, FeatureExtractor,
    LossWeights, MemoryBank,
};
use crate::model::{
    apply_affine, is_pose_group, Conditioning, LatentBatch, LatentMode, SceneModel, Source, SHARED_ENCODER,
};
use crate::rasterizer::{RenderSettings, Renderer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Final iterations of stage 4 trained at `lr / 5`.
    pub lr_tail: usize,
    /// Rate multiplier for the auto-decoder pose table. A row only gets a
    /// gradient when its image is in the batch, and its azimuth offset needs
    /// raw values of order one.
    pub pose_latent_lr_scale: f64,
    pub stages: [usize; NUM_STAGES],
    pub milestones: Milestones,
    /// Probability of replacing a predicted texture by its mean color.
    pub average_prob: f64,
    /// Average every texture in stage 1.
    pub average_stage1: bool,
    /// Keep the random averaging in stage 4.
    pub average_last_stage: bool,
    pub neighbors: bool,
    pub bank_capacity: usize,
    pub weights: LossWeights,
    pub sigma: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn synthetic() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-4,
            lr_tail: 10_000,
            pose_latent_lr_scale: 1.0,
            stages: [50_000, 250_000, 250_000, 250_000],
            milestones: Milestones {
                deform: 5_000,
                scale: 10_000,
            },
            average_prob: 0.2,
            average_stage1: true,
            average_last_stage: true,
            neighbors: true,
            bank_capacity: crate::losses::bank::DEFAULT_CAPACITY,
            weights: LossWeights::default(),
            sigma: 1e-4,
            seed: 0,
        }
    }

    pub fn real() -> Self {
        TrainConfig {
            stages: [750_000; NUM_STAGES],
            milestones: Milestones {
                deform: 25_000,
                scale: 50_000,
            },
            lr_tail: 30_000,
            average_stage1: false,
            average_last_stage: false,
            ..Self::synthetic()
        }
    }

    /// Budgets roughly 80 times smaller and a larger step size.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            lr: 1e-3,
            lr_tail: 300,
            pose_latent_lr_scale: 10.0,
            stages: [1_000, 3_000, 3_000, 3_000],
            milestones: Milestones {
                deform: 100,
                scale: 200,
            },
            ..Self::synthetic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stages.contains(&0) {
            return Err(invalid("batch size and stage budgets must be positive"));
        }
        if !(0.0..=1.0).contains(&self.average_prob) {
            return Err(invalid(format!("averaging probability {} outside [0, 1]", self.average_prob)));
        }
        if !(self.lr > 0.0) || !(self.sigma > 0.0) || !(self.pose_latent_lr_scale > 0.0) {
            return Err(invalid("learning rates and sigma must be positive"));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parity {
    #[serde(rename = "3d")]
    Shape,
    #[serde(rename = "pose")]
    Pose,
}

impl Parity {
    pub fn of(iteration: usize) -> Self {
        if iteration % 2 == 0 {
            Parity::Shape
        } else {
            Parity::Pose
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Parity::Shape => "3d",
            Parity::Pose => "pose",
        }
    }
}

/// With probability `p`, true: the texture should be averaged.
pub fn maybe_average_texture(rng: &mut impl Rng, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// One logged iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iteration: usize,
    pub stage: usize,
    pub parity: Parity,
    pub lr: f64,
    pub total: f64,
    pub rec: f64,
    pub pix: f64,
    pub perc: f64,
    pub reg: f64,
    pub nbr: f64,
    pub uni: f64,
    /// Batch mean of the candidate probabilities.
    pub mean_probs: Vec<f64>,
    pub skipped_neighbors: usize,
    pub averaged_textures: usize,
}

impl Metrics {
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "iter={} stage={} parity={} lr={:e} total={:.6e} rec={:.6e} pix={:.6e} perc={:.6e} reg={:.6e} nbr={:.6e} uni={:.6e} skipped={} averaged={} p=",
            self.iteration,
            self.stage,
            self.parity.as_str(),
            self.lr,
            self.total,
            self.rec,
            self.pix,
            self.perc,
            self.reg,
            self.nbr,
            self.uni,
            self.skipped_neighbors,
            self.averaged_textures
        );
        for (i, p) in self.mean_probs.iter().enumerate() {
            let _ = write!(s, "{}{:.4}", if i == 0 { "" } else { "," }, p);
        }
        s
    }
}

/// Training images with their dataset rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rows: Vec<usize>,
    /// `[B, H, W, 3]`.
    pub images: Array,
}

impl Batch {
    pub fn gather(images: &[Array], rows: &[usize]) -> Result<Batch> {
        let first = images.first().ok_or_else(|| invalid("no training images"))?;
        let s = first.shape().to_vec();
        let mut data = Vec::with_capacity(rows.len() * first.len());
        for &r in rows {
            let img = images.get(r).ok_or_else(|| invalid(format!("row {r} outside the dataset")))?;
            if img.shape() != s.as_slice() {
                return Err(invalid(format!("image {r} has shape {:?}, expected {s:?}", img.shape())));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Batch {
            rows: rows.to_vec(),
            images: Array::new([rows.len(), s[0], s[1], s[2]], data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn image(&self, b: usize) -> Result<Array> {
        let s = self.images.shape();
        let n = s[1] * s[2] * s[3];
        Ok(Array::new([s[1], s[2], s[3]], self.images.data()[b * n..(b + 1) * n].to_vec())?)
    }
}

/// Seeded epoch shuffling.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next(&mut self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub struct Trainer {
    pub model: SceneModel,
    pub config: TrainConfig,
    pub renderer: Renderer,
    pub scheduler: StageScheduler,
    pub bank: MemoryBank,
    adam: Adam,
    topology: MeshTopology,
    features: Box<dyn FeatureExtractor>,
    rng: ChaCha8Rng,
    sampler: Option<BatchSampler>,
    iteration: usize,
}

struct Terms {
    total: Var,
    rec: Vec<Var>,
    pix: Vec<Var>,
    perc: Vec<Var>,
    reg: Vec<Var>,
    nbr: Vec<Var>,
    uni: Option<Var>,
    skipped: usize,
    averaged: usize,
    probs: Var,
}

fn mean_of(tape: &Tape, vars: &[Var]) -> f64 {
    if vars.is_empty() {
        0.0
    } else {
        vars.iter().map(|&v| tape.value(v).item()).sum::<f64>() / vars.len() as f64
    }
}

impl Trainer {
    pub fn new(model: SceneModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let renderer = Renderer::new(model.config.camera()?, RenderSettings::default().with_sigma(config.sigma))?;
        let topology = MeshTopology::new(model.template())?;
        let scheduler = StageScheduler::new(config.stages, config.milestones, config.lr_tail);
        let mut adam = Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        for (i, p) in model.store.iter().enumerate() {
            if p.group == "latent.pose" {
                adam.set_lr_scale(i, config.pose_latent_lr_scale);
            }
        }
        Ok(Trainer {
            adam,
            bank: MemoryBank::new(config.bank_capacity),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            renderer,
            scheduler,
            topology,
            features: Box::new(BinomialPyramid::default()),
            sampler: None,
            iteration: 0,
            config,
        })
    }

    /// Swaps in another perceptual feature extractor.
    pub fn with_features(mut self, features: Box<dyn FeatureExtractor>) -> Self {
        self.features = features;
        self
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn next_parity(&self) -> Parity {
        Parity::of(self.iteration)
    }

    fn averaging(&mut self, stage: usize) -> bool {
        if stage == 1 && self.config.average_stage1 {
            return true;
        }
        if stage == NUM_STAGES && !self.config.average_last_stage {
            return false;
        }
        maybe_average_texture(&mut self.rng, self.config.average_prob)
    }

    fn source<'a>(&self, batch: &'a Batch) -> Source<'a> {
        match self.model.config.mode {
            LatentMode::Encoder => Source::Images(&batch.images),
            LatentMode::AutoDecoder => Source::Rows(&batch.rows),
        }
    }

    /// Draws the next batch from `images` and runs one step.
    pub fn train_step(&mut self, images: &[Array]) -> Result<Metrics> {
        let sampler = self.sampler.get_or_insert_with(|| BatchSampler::new(images.len()));
        let rows = sampler.next(self.config.batch_size, &mut self.rng);
        let batch = Batch::gather(images, &rows)?;
        self.step(&batch)
    }

    /// Runs until every stage budget is used, calling `log` after each step.
    pub fn train(&mut self, images: &[Array], mut log: impl FnMut(&Metrics)) -> Result<()> {
        while !self.scheduler.finished() {
            let m = self.train_step(images)?;
            log(&m);
        }
        Ok(())
    }

    /// One 3D-step or P-step, alternating with every call.
    pub fn step(&mut self, batch: &Batch) -> Result<Metrics> {
        let parity = self.next_parity();
        let cond = self.scheduler.conditioning();
        let lr = self.scheduler.lr(self.config.lr);
        self.adam.set_lr(lr);
        let mut tape = Tape::new();
        let bound = match parity {
            Parity::Shape => self.model.store.bind(&mut tape, |g| !is_pose_group(g)),
            Parity::Pose => self.model.store.bind(&mut tape, |g| is_pose_group(g) || g == SHARED_ENCODER),
        };
        let source = self.source(batch);
        let lat = self.model.encode(&mut tape, &bound, source, cond)?;
        let terms = match parity {
            Parity::Shape => self.shape_terms(&mut tape, &bound, &lat, batch, cond)?,
            Parity::Pose => self.pose_terms(&mut tape, &bound, &lat, batch, cond)?,
        };
        let total = tape.value(terms.total).item();
        let k = lat.candidates;
        let probs = tape.value(terms.probs).data();
        let b = lat.batch as f64;
        let mean_probs = (0..k)
            .map(|j| probs.iter().skip(j).step_by(k).sum::<f64>() / b)
            .collect();
        let metrics = Metrics {
            iteration: self.iteration,
            stage: cond.stage,
            parity,
            lr,
            total,
            rec: mean_of(&tape, &terms.rec),
            pix: mean_of(&tape, &terms.pix),
            perc: mean_of(&tape, &terms.perc),
            reg: mean_of(&tape, &terms.reg),
            nbr: mean_of(&tape, &terms.nbr),
            uni: terms.uni.map(|u| tape.value(u).item()).unwrap_or(0.0),
            mean_probs,
            skipped_neighbors: terms.skipped,
            averaged_textures: terms.averaged,
        };
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                stage: cond.stage,
                sigma: self.config.sigma,
                detail: format!("rows {:?}; {}", batch.rows, metrics.log_line()),
            });
        }
        let grads = tape.backward(terms.total)?;
        self.adam.step(&mut self.model.store, &bound, &grads).map_err(|e| Error::NonFiniteLoss {
            iteration: self.iteration,
            stage: cond.stage,
            sigma: self.config.sigma,
            detail: format!("rows {:?}; {e}", batch.rows),
        })?;
        if parity == Parity::Shape && self.config.neighbors {
            self.update_bank(&tape, &lat, batch)?;
        }
        self.iteration += 1;
        for e in self.scheduler.tick() {
            log::info!("iteration {}: {e:?}", self.iteration);
        }
        Ok(metrics)
    }

    fn shape_terms(&mut self, tape: &mut Tape, bound: &Bound, lat: &LatentBatch, batch: &Batch, cond: Conditioning) -> Result<Terms> {
        let selected = lat.selected(tape);
        let w = self.config.weights;
        let mut t = Terms {
            total: tape.scalar(0.0),
            rec: Vec::new(),
            pix: Vec::new(),
            perc: Vec::new(),
            reg: Vec::new(),
            nbr: Vec::new(),
            uni: None,
            skipped: 0,
            averaged: 0,
            probs: lat.probs,
        };
        let mut totals = Vec::with_capacity(lat.batch);
        for (b, &k) in selected.iter().enumerate() {
            let averaged = self.averaging(cond.stage);
            t.averaged += averaged as usize;
            let inst = lat.instance(tape, b, k)?;
            let (r, verts) = self.model.render_instance(tape, bound, &self.renderer, &inst, cond, averaged)?;
            let img = r.image(tape)?;
            let target = tape.constant(batch.image(b)?);
            let rec = rec_loss(tape, target, img, self.features.as_ref(), w.perc)?;
            let reg = mesh_regularization(tape, verts, &self.topology)?;
            let nbr = if cond.stage > 1 && self.config.neighbors && !self.bank.is_empty() {
                let query = NeighborQuery {
                    latents: lat,
                    item: b,
                    candidate: k,
                    rotation: lat.pose(tape, b, k).rotation(),
                };
                let out = neighbor_loss(
                    tape,
                    bound,
                    &self.model,
                    &self.renderer,
                    &query,
                    &self.bank,
                    cond,
                    averaged,
                    self.features.as_ref(),
                    w.perc,
                    &mut self.rng,
                )?;
                t.skipped += out.skipped;
                out.loss
            } else {
                None
            };
            totals.push(l3d(tape, rec.total, nbr, reg, cond.stage, &w)?);
            t.rec.push(rec.total);
            t.pix.push(rec.pix);
            t.perc.push(rec.perc);
            t.reg.push(reg);
            t.nbr.extend(nbr);
        }
        let s = tape.stack(&totals)?;
        t.total = tape.mean(s);
        Ok(t)
    }

    fn pose_terms(&mut self, tape: &mut Tape, bound: &Bound, lat: &LatentBatch, batch: &Batch, cond: Conditioning) -> Result<Terms> {
        let w = self.config.weights;
        let kk = lat.candidates;
        let verts = self.model.deform(tape, bound, lat.z_sh, cond)?;
        let mut t = Terms {
            total: tape.scalar(0.0),
            rec: Vec::new(),
            pix: Vec::new(),
            perc: Vec::new(),
            reg: Vec::new(),
            nbr: Vec::new(),
            uni: None,
            skipped: 0,
            averaged: 0,
            probs: lat.probs,
        };
        let mut flags = Vec::with_capacity(lat.batch);
        for _ in 0..lat.batch {
            flags.push(self.averaging(cond.stage));
        }
        let plain = self.model.textures(tape, bound, lat.z_tx, false)?;
        let avg = crate::model::average_image(tape, plain)?;
        let bgs = self.model.backgrounds(tape, bound, lat.z_bg, lat.batch)?;
        let (s, n) = (self.model.config.texture_size, self.model.config.image_size);
        let mut expected = Vec::with_capacity(lat.batch);
        for b in 0..lat.batch {
            t.averaged += flags[b] as usize;
            let tex = tape.slice(if flags[b] { avg } else { plain }, 0, b, 1)?;
            let tex = tape.reshape(tex, &[s, s, 3])?;
            let bg = tape.slice(bgs, 0, b, 1)?;
            let bg = tape.reshape(bg, &[n, n, 3])?;
            let target = tape.constant(batch.image(b)?);
            let mut losses = Vec::with_capacity(kk);
            for k in 0..kk {
                let inst = lat.instance(tape, b, k)?;
                let posed = apply_affine(tape, verts[b], &inst)?;
                let r = self
                    .renderer
                    .render(tape, posed, self.model.faces(), self.model.uv(), tex, bg)?;
                let img = r.image(tape)?;
                let rec = rec_loss(tape, target, img, self.features.as_ref(), w.perc)?;
                t.pix.push(rec.pix);
                t.perc.push(rec.perc);
                t.rec.push(rec.total);
                losses.push(rec.total);
            }
            let l = tape.stack(&losses)?;
            let p = tape.slice(lat.probs, 0, b, 1)?;
            let p = tape.reshape(p, &[kk])?;
            let e = tape.mul(p, l)?;
            expected.push(tape.sum(e));
        }
        let e = tape.stack(&expected)?;
        let e = tape.mean(e);
        let uni = uniformity_loss(tape, lat.probs)?;
        let u = tape.scale(uni, w.uni);
        t.total = tape.add(e, u)?;
        t.uni = Some(uni);
        Ok(t)
    }

    fn update_bank(&mut self, tape: &Tape, lat: &LatentBatch, batch: &Batch) -> Result<()> {
        let selected = lat.selected(tape);
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let d = tape.shape(v)[1];
            tape.value(v).data().chunks(d.max(1)).map(|c| c[..d].to_vec()).collect()
        };
        let z_sh = rows(lat.z_sh);
        let z_tx = rows(lat.z_tx);
        let z_bg = lat.z_bg.map(rows);
        let by_row = self.model.config.mode == LatentMode::AutoDecoder;
        for (b, &k) in selected.iter().enumerate() {
            self.bank.push(BankEntry {
                image: batch.image(b)?,
                row: by_row.then_some(batch.rows[b]),
                z_sh: z_sh.get(b).cloned().unwrap_or_default(),
                z_tx: z_tx.get(b).cloned().unwrap_or_default(),
                z_bg: z_bg.as_ref().map(|z| z[b].clone()),
                rotation: lat.pose(tape, b, k).rotation(),
            });
        }
        Ok(())
    }

    /// Parameters and loop position in the checkpoint format.
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let state = Array::from_vec(vec![
            self.iteration as f64,
            self.scheduler.stage() as f64,
            self.scheduler.in_stage() as f64,
        ]);
        let mut entries: Vec<(&str, &Array)> = self.model.store.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        entries.push(("trainer.state", &state));
        checkpoint::save(path, &entries)?;
        Ok(())
    }

    /// Restores parameters and loop position; optimizer moments restart.
    pub fn load_checkpoint(&mut self, path: &std::path::Path) -> Result<()> {
        let mut values = checkpoint::load(path)?;
        if let Some(i) = values.iter().position(|(n, _)| n == "trainer.state") {
            let (_, s) = values.remove(i);
            let d = s.data();
            if d.len() == 3 {
                self.iteration = d[0] as usize;
                self.scheduler.seek(d[1] as usize, d[2] as usize);
            }
        }
        self.model.store.load_values(values)?;
        Ok(())
    }
}
