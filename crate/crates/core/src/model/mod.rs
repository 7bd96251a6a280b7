//! The structured autoencoder: image encoder (or per-image latents),
//! deformation field, texture and background generators and the pose
//! candidates.
//!
//! Parameters live in one [`ParamStore`] split into groups; the trainer picks
//! which groups are trainable in each step. Pose-related groups are listed by
//! [`is_pose_group`].

pub mod config;
pub mod networks;
pub mod rotation;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softmesh_tensor::nn::{permute, Mlp};
use softmesh_tensor::{Array, Bound, ParamId, ParamStore, Tape, Var};

pub use config::{ConditioningSchedule, EllipsoidConfig, LatentMode, ModelConfig, PoseRanges, Range};
pub use networks::{Backbone, DeformNet, Generator};
pub use rotation::{euler_matrix, euler_matrix_tape, geodesic_angle, Mat3};

use crate::error::{invalid, Result};
use crate::geometry::{make_ellipsoid, TriMesh, Vec3};
use crate::rasterizer::{solid_image, Rendered, Renderer};

pub const SHARED_ENCODER: &str = "encoder";
const POSE_GROUPS: [&str; 3] = ["pose_head", "encoder.pose", "latent.pose"];

/// Groups updated by the P-step only.
pub fn is_pose_group(group: &str) -> bool {
    POSE_GROUPS.contains(&group)
}

/// Values per candidate in the raw pose output: azimuth offset, elevation,
/// roll, tx, ty, tz. The K logits follow the 6K candidate values.
pub const POSE_VALUES: usize = 6;

/// Which parts of the model are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conditioning {
    /// Progressive-conditioning stage, 1..=4.
    pub stage: usize,
    pub deform_enabled: bool,
    pub scale_enabled: bool,
}

impl Conditioning {
    pub fn full(stage: usize) -> Self {
        Conditioning {
            stage,
            deform_enabled: true,
            scale_enabled: true,
        }
    }
}

/// Where codes come from.
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    /// `[B, H, W, 3]` images, encoder mode.
    Images(&'a Array),
    /// Dataset rows, auto-decoder mode.
    Rows(&'a [usize]),
}

/// Codes and pose candidates for a batch, all on the tape.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    pub batch: usize,
    pub candidates: usize,
    /// `[B, D_sh]`, masked.
    pub z_sh: Var,
    /// `[B, 3]`.
    pub scale: Var,
    /// `[B, D_tx]`, masked.
    pub z_tx: Var,
    /// `[B, D_bg]`, masked; `None` without a background model.
    pub z_bg: Option<Var>,
    /// Radians, `[B, K]` each.
    pub azimuth: Var,
    pub elevation: Var,
    pub roll: Var,
    /// `[B, K]` each.
    pub tx: Var,
    pub ty: Var,
    pub tz: Var,
    pub logits: Var,
    /// Normalized exponentials of `logits`.
    pub probs: Var,
}

/// One object's codes and a single pose, the unit the renderer consumes.
#[derive(Clone, Copy, Debug)]
pub struct Instance {
    /// `[1, D_sh]`.
    pub z_sh: Var,
    /// `[1, 3]`.
    pub scale: Var,
    pub z_tx: Var,
    pub z_bg: Option<Var>,
    /// Scalars.
    pub azimuth: Var,
    pub elevation: Var,
    pub roll: Var,
    /// `[3]`.
    pub translation: Var,
}

/// Plain-value affine parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub scale: Vec3,
    pub azimuth: f64,
    pub elevation: f64,
    pub roll: f64,
    pub translation: Vec3,
}

impl Pose {
    pub fn rotation(&self) -> Mat3 {
        euler_matrix(self.azimuth, self.elevation, self.roll)
    }

    /// `rot(r) diag(s) x + t`.
    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = self.rotation();
        let q = rotation::mat_vec(&r, [p[0] * self.scale[0], p[1] * self.scale[1], p[2] * self.scale[2]]);
        [q[0] + self.translation[0], q[1] + self.translation[1], q[2] + self.translation[2]]
    }

    pub fn apply_mesh(&self, mesh: &TriMesh) -> TriMesh {
        mesh.map_vertices(|p| self.apply(p))
    }
}

impl LatentBatch {
    fn at(tape: &mut Tape, m: Var, b: usize, k: usize, kk: usize) -> Result<Var> {
        let flat = tape.reshape(m, &[tape.value(m).len()])?;
        Ok(tape.index(flat, b * kk + k)?)
    }

    /// Batch item `b` posed with candidate `k`.
    pub fn instance(&self, tape: &mut Tape, b: usize, k: usize) -> Result<Instance> {
        if b >= self.batch || k >= self.candidates {
            return Err(invalid(format!("instance ({b}, {k}) outside {}x{}", self.batch, self.candidates)));
        }
        let kk = self.candidates;
        let z_sh = tape.slice(self.z_sh, 0, b, 1)?;
        let scale = tape.slice(self.scale, 0, b, 1)?;
        let z_tx = tape.slice(self.z_tx, 0, b, 1)?;
        let z_bg = match self.z_bg {
            Some(z) => Some(tape.slice(z, 0, b, 1)?),
            None => None,
        };
        let azimuth = Self::at(tape, self.azimuth, b, k, kk)?;
        let elevation = Self::at(tape, self.elevation, b, k, kk)?;
        let roll = Self::at(tape, self.roll, b, k, kk)?;
        let tx = Self::at(tape, self.tx, b, k, kk)?;
        let ty = Self::at(tape, self.ty, b, k, kk)?;
        let tz = Self::at(tape, self.tz, b, k, kk)?;
        let translation = tape.stack(&[tx, ty, tz])?;
        Ok(Instance {
            z_sh,
            scale,
            z_tx,
            z_bg,
            azimuth,
            elevation,
            roll,
            translation,
        })
    }

    /// Current probabilities as rows.
    pub fn probs_rows(&self, tape: &Tape) -> Vec<Vec<f64>> {
        tape.value(self.probs).data().chunks(self.candidates).map(|r| r.to_vec()).collect()
    }

    /// Argmax candidate per batch item.
    pub fn selected(&self, tape: &Tape) -> Vec<usize> {
        self.probs_rows(tape).iter().map(|r| argmax(r)).collect()
    }

    pub fn pose(&self, tape: &Tape, b: usize, k: usize) -> Pose {
        let kk = self.candidates;
        let v = |m: Var| tape.value(m).data()[b * kk + k];
        let s = &tape.value(self.scale).data()[3 * b..3 * b + 3];
        Pose {
            scale: [s[0], s[1], s[2]],
            azimuth: v(self.azimuth),
            elevation: v(self.elevation),
            roll: v(self.roll),
            translation: [v(self.tx), v(self.ty), v(self.tz)],
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `1` for the first `active` of `dim` entries, `0` after.
pub fn code_mask(dim: usize, active: usize) -> Array {
    Array::new([1, dim], (0..dim).map(|i| if i < active { 1.0 } else { 0.0 }).collect())
        .expect("mask shape")
}

/// Zeroes every code entry at or past `active`.
pub fn mask_code(tape: &mut Tape, code: Var, active: usize) -> Result<Var> {
    let dim = tape.shape(code)[1];
    if active >= dim {
        return Ok(code);
    }
    let m = tape.constant(code_mask(dim, active));
    Ok(tape.mul(code, m)?)
}

/// `diag(s)`, then `rot(r)`, then `+t` on `[N, 3]` vertices.
pub fn apply_affine(tape: &mut Tape, verts: Var, inst: &Instance) -> Result<Var> {
    let scaled = tape.mul(verts, inst.scale)?;
    let r = euler_matrix_tape(tape, inst.azimuth, inst.elevation, inst.roll)?;
    let rt = tape.transpose(r)?;
    let rotated = tape.matmul(scaled, rt)?;
    Ok(tape.add(rotated, inst.translation)?)
}

#[derive(Clone, Debug)]
enum Encoder {
    Shared(Backbone),
    Separate {
        shape: Backbone,
        texture: Backbone,
        background: Option<Backbone>,
        pose: Backbone,
    },
}

#[derive(Clone, Debug)]
struct Heads {
    encoder: Encoder,
    shape: Mlp,
    texture: Mlp,
    background: Option<Mlp>,
    pose: Mlp,
}

#[derive(Clone, Debug)]
struct Latents {
    shape: ParamId,
    texture: ParamId,
    background: Option<ParamId>,
    pose: ParamId,
}

#[derive(Clone, Debug)]
enum CodeSource {
    Encoder(Heads),
    Table(Latents),
}

#[derive(Clone, Debug)]
pub struct SceneModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    codes: CodeSource,
    deform: DeformNet,
    texture_gen: Generator,
    background_gen: Option<Generator>,
    template: TriMesh,
    template_points: Array,
}

impl SceneModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d_sh, d_tx, d_bg) = config.schedule.max_dims();
        let k = config.candidates;
        let pose_out = (POSE_VALUES + 1) * k;
        let bg = config.learn_background;

        let codes = match config.mode {
            LatentMode::Encoder => {
                let ch = &config.encoder_channels;
                let encoder = if config.separate_backbones {
                    Encoder::Separate {
                        shape: Backbone::new(&mut store, "encoder.shape", ch, &mut rng)?,
                        texture: Backbone::new(&mut store, "encoder.texture", ch, &mut rng)?,
                        background: if bg {
                            Some(Backbone::new(&mut store, "encoder.background", ch, &mut rng)?)
                        } else {
                            None
                        },
                        pose: Backbone::new(&mut store, "encoder.pose", ch, &mut rng)?,
                    }
                } else {
                    Encoder::Shared(Backbone::new(&mut store, SHARED_ENCODER, ch, &mut rng)?)
                };
                let f = *ch.last().expect("validated");
                let (w, h) = (config.head_width, config.head_hidden_layers);
                let head = |store: &mut ParamStore, name: &str, out: usize, rng: &mut ChaCha8Rng| {
                    networks::head(store, name, f, w, h, out, rng)
                };
                CodeSource::Encoder(Heads {
                    encoder,
                    shape: head(&mut store, "shape_head", d_sh + 3, &mut rng)?,
                    texture: head(&mut store, "texture_head", d_tx, &mut rng)?,
                    background: if bg {
                        Some(head(&mut store, "background_head", d_bg, &mut rng)?)
                    } else {
                        None
                    },
                    pose: head(&mut store, "pose_head", pose_out, &mut rng)?,
                })
            }
            LatentMode::AutoDecoder => {
                let n = config.num_images;
                // Zero codes: a masked column keeps its value, so a stage
                // transition changes nothing until the column is trained.
                // Zero pose latents start at the reference views with uniform
                // probabilities.
                let mut table = |name: &str, dim: usize| store.add(name, name, Array::zeros([n, dim]));
                let shape = table("latent.shape", d_sh + 3)?;
                let texture = table("latent.texture", d_tx)?;
                let background = if bg { Some(table("latent.background", d_bg)?) } else { None };
                let pose = table("latent.pose", pose_out)?;
                CodeSource::Table(Latents {
                    shape,
                    texture,
                    background,
                    pose,
                })
            }
        };

        let deform = DeformNet::new(&mut store, d_sh, config.deform_width, config.deform_hidden_layers, &mut rng)?;
        let gc = config.generator_channels;
        let texture_gen = Generator::new(&mut store, "texture_gen", d_tx, gc, config.texture_size, &mut rng)?;
        let background_gen = if bg {
            Some(Generator::new(&mut store, "background_gen", d_bg, gc, config.image_size, &mut rng)?)
        } else {
            None
        };
        let e = config.ellipsoid;
        let template = make_ellipsoid(e.subdivisions, e.axis_scale, e.scale)?;
        let template_points = Array::new([template.num_vertices(), 3], template.vertex_data())?;
        Ok(SceneModel {
            config,
            store,
            codes,
            deform,
            texture_gen,
            background_gen,
            template,
            template_points,
        })
    }

    /// The undeformed ellipsoid.
    pub fn template(&self) -> &TriMesh {
        &self.template
    }

    pub fn has_background_model(&self) -> bool {
        self.background_gen.is_some()
    }

    fn raw_codes(&self, tape: &mut Tape, bound: &Bound, source: Source) -> Result<(Var, Var, Option<Var>, Var, usize)> {
        match (&self.codes, source) {
            (CodeSource::Encoder(heads), Source::Images(images)) => {
                let s = images.shape();
                let n = self.config.image_size;
                if s.len() != 4 || s[1] != n || s[2] != n || s[3] != 3 {
                    return Err(invalid(format!("expected [B, {n}, {n}, 3] images, got {s:?}")));
                }
                let x = tape.constant(images.clone());
                let x = permute(tape, x, &[0, 3, 1, 2])?;
                let (fs, ft, fb, fp) = match &heads.encoder {
                    Encoder::Shared(b) => {
                        let f = b.forward(tape, bound, x)?;
                        (f, f, Some(f), f)
                    }
                    Encoder::Separate {
                        shape,
                        texture,
                        background,
                        pose,
                    } => {
                        let fb = match background {
                            Some(b) => Some(b.forward(tape, bound, x)?),
                            None => None,
                        };
                        (
                            shape.forward(tape, bound, x)?,
                            texture.forward(tape, bound, x)?,
                            fb,
                            pose.forward(tape, bound, x)?,
                        )
                    }
                };
                let sh = heads.shape.forward(tape, bound, fs)?;
                let tx = heads.texture.forward(tape, bound, ft)?;
                let bg = match (&heads.background, fb) {
                    (Some(h), Some(f)) => Some(h.forward(tape, bound, f)?),
                    _ => None,
                };
                let pose = heads.pose.forward(tape, bound, fp)?;
                Ok((sh, tx, bg, pose, s[0]))
            }
            (CodeSource::Table(l), Source::Rows(rows)) => {
                if let Some(&r) = rows.iter().find(|&&r| r >= self.config.num_images) {
                    return Err(invalid(format!("row {r} outside {} latents", self.config.num_images)));
                }
                let sh = tape.gather(bound.var(l.shape), rows)?;
                let tx = tape.gather(bound.var(l.texture), rows)?;
                let bg = match l.background {
                    Some(b) => Some(tape.gather(bound.var(b), rows)?),
                    None => None,
                };
                let pose = tape.gather(bound.var(l.pose), rows)?;
                Ok((sh, tx, bg, pose, rows.len()))
            }
            (CodeSource::Encoder(_), Source::Rows(_)) => Err(invalid("encoder model needs images")),
            (CodeSource::Table(_), Source::Images(_)) => Err(invalid("auto-decoder model needs dataset rows")),
        }
    }

    fn ranged(tape: &mut Tape, raw: Var, range: Range, unit: f64) -> Var {
        let t = tape.tanh(raw);
        tape.affine(t, range.half_range * unit, range.center * unit)
    }

    /// Codes, scale and the K pose candidates for a batch.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, source: Source, cond: Conditioning) -> Result<LatentBatch> {
        let (raw_sh, raw_tx, raw_bg, raw_pose, batch) = self.raw_codes(tape, bound, source)?;
        let c = &self.config;
        let (d_sh, _, _) = c.schedule.max_dims();
        let (a_sh, a_tx, a_bg) = c.schedule.dims(cond.stage);

        let z_sh = tape.slice(raw_sh, 1, 0, d_sh)?;
        let z_sh = mask_code(tape, z_sh, a_sh)?;
        let scale = if cond.scale_enabled {
            let s = tape.slice(raw_sh, 1, d_sh, 3)?;
            Self::ranged(tape, s, c.ranges.scale, 1.0)
        } else {
            tape.constant(Array::full([batch, 3], c.ranges.scale.center))
        };
        let z_tx = mask_code(tape, raw_tx, a_tx)?;
        let z_bg = match raw_bg {
            Some(z) => Some(mask_code(tape, z, a_bg)?),
            None => None,
        };

        let k = c.candidates;
        let cand = tape.slice(raw_pose, 1, 0, POSE_VALUES * k)?;
        let cand = tape.reshape(cand, &[batch, k, POSE_VALUES])?;
        let part = |tape: &mut Tape, i: usize| -> Result<Var> {
            let p = tape.slice(cand, 2, i, 1)?;
            Ok(tape.reshape(p, &[batch, k])?)
        };
        let raw_az = part(tape, 0)?;
        let raw_el = part(tape, 1)?;
        let raw_roll = part(tape, 2)?;
        let raw_tx_ = part(tape, 3)?;
        let raw_ty = part(tape, 4)?;
        let raw_tz = part(tape, 5)?;

        let offset = Self::ranged(tape, raw_az, Range::new(0.0, PI / k as f64), 1.0);
        let reference = tape.constant(Array::new([1, k], reference_azimuths(k))?);
        let azimuth = tape.add(offset, reference)?;
        let deg = PI / 180.0;
        let elevation = Self::ranged(tape, raw_el, c.ranges.elevation_deg, deg);
        let roll = Self::ranged(tape, raw_roll, c.ranges.roll_deg, deg);
        let tx = Self::ranged(tape, raw_tx_, c.ranges.tx, 1.0);
        let ty = Self::ranged(tape, raw_ty, c.ranges.ty, 1.0);
        let tz = Self::ranged(tape, raw_tz, c.ranges.tz, 1.0);
        let logits = tape.slice(raw_pose, 1, POSE_VALUES * k, k)?;
        let probs = tape.softmax(logits)?;
        Ok(LatentBatch {
            batch,
            candidates: k,
            z_sh,
            scale,
            z_tx,
            z_bg,
            azimuth,
            elevation,
            roll,
            tx,
            ty,
            tz,
            logits,
            probs,
        })
    }

    /// Object-space vertices `[N, 3]` of the deformed ellipsoid for each row
    /// of `z_sh`.
    pub fn deform(&self, tape: &mut Tape, bound: &Bound, z_sh: Var, cond: Conditioning) -> Result<Vec<Var>> {
        let batch = tape.shape(z_sh)[0];
        let x0 = tape.constant(self.template_points.clone());
        if !cond.deform_enabled {
            return Ok(vec![x0; batch]);
        }
        let disp = self.deform.forward(tape, bound, x0, z_sh)?;
        disp.into_iter().map(|d| Ok(tape.add(x0, d)?)).collect()
    }

    /// `[B, S, S, 3]` UV images; `averaged` replaces each by its mean color.
    pub fn textures(&self, tape: &mut Tape, bound: &Bound, z_tx: Var, averaged: bool) -> Result<Var> {
        let t = self.texture_gen.forward(tape, bound, z_tx)?;
        if averaged {
            average_image(tape, t)
        } else {
            Ok(t)
        }
    }

    /// `[B, H, W, 3]` backgrounds: generated, or the fixed color.
    pub fn backgrounds(&self, tape: &mut Tape, bound: &Bound, z_bg: Option<Var>, batch: usize) -> Result<Var> {
        match (&self.background_gen, z_bg) {
            (Some(g), Some(z)) => g.forward(tape, bound, z),
            _ => {
                let n = self.config.image_size;
                let one = solid_image(n, n, self.config.background_color);
                let data = one.data().repeat(batch);
                Ok(tape.constant(Array::new([batch, n, n, 3], data)?))
            }
        }
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        self.template.faces()
    }

    pub fn uv(&self) -> &[[f64; 2]] {
        self.template.uv()
    }

    /// Renders one instance. Returns the image node and the object-space
    /// vertices used for mesh regularization.
    pub fn render_instance(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        renderer: &Renderer,
        inst: &Instance,
        cond: Conditioning,
        averaged: bool,
    ) -> Result<(Rendered, Var)> {
        let verts = self.deform(tape, bound, inst.z_sh, cond)?[0];
        let posed = apply_affine(tape, verts, inst)?;
        let tex = self.textures(tape, bound, inst.z_tx, averaged)?;
        let s = self.config.texture_size;
        let tex = tape.reshape(tex, &[s, s, 3])?;
        let bg = self.backgrounds(tape, bound, inst.z_bg, 1)?;
        let n = self.config.image_size;
        let bg = tape.reshape(bg, &[n, n, 3])?;
        let r = renderer.render(tape, posed, self.faces(), self.uv(), tex, bg)?;
        Ok((r, verts))
    }

    /// Deformed object-space mesh, texture and background as plain values.
    pub fn decode(&self, source: Source, cond: Conditioning) -> Result<Vec<Decoded>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, |_| false);
        let lat = self.encode(&mut tape, &bound, source, cond)?;
        let verts = self.deform(&mut tape, &bound, lat.z_sh, cond)?;
        let tex = self.textures(&mut tape, &bound, lat.z_tx, false)?;
        let bg = self.backgrounds(&mut tape, &bound, lat.z_bg, lat.batch)?;
        let selected = lat.selected(&tape);
        let probs = lat.probs_rows(&tape);
        let s = self.config.texture_size;
        let n = self.config.image_size;
        let mut out = Vec::with_capacity(lat.batch);
        for (b, &v) in verts.iter().enumerate() {
            let mesh = self.template.with_vertices(rows3(tape.value(v).data()))?;
            let t = tape.value(tex).data()[b * s * s * 3..(b + 1) * s * s * 3].to_vec();
            let g = tape.value(bg).data()[b * n * n * 3..(b + 1) * n * n * 3].to_vec();
            out.push(Decoded {
                mesh,
                texture: Array::new([s, s, 3], t)?,
                background: Array::new([n, n, 3], g)?,
                selected: selected[b],
                probs: probs[b].clone(),
                poses: (0..lat.candidates).map(|k| lat.pose(&tape, b, k)).collect(),
            });
        }
        Ok(out)
    }
}

/// Plain-value reconstruction of one input.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub mesh: TriMesh,
    pub texture: Array,
    pub background: Array,
    pub selected: usize,
    pub probs: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl Decoded {
    pub fn pose(&self) -> Pose {
        self.poses[self.selected]
    }

    /// The selected pose applied: the mesh the camera sees.
    pub fn posed_mesh(&self) -> TriMesh {
        self.pose().apply_mesh(&self.mesh)
    }
}

/// `2πk/K` for k in 0..K.
pub fn reference_azimuths(k: usize) -> Vec<f64> {
    (0..k).map(|i| 2.0 * PI * i as f64 / k as f64).collect()
}

/// Replaces each `[B, H, W, C]` image by its per-channel spatial mean.
pub fn average_image(tape: &mut Tape, images: Var) -> Result<Var> {
    let shape = tape.shape(images).to_vec();
    let m = tape.mean_axis(images, 1)?;
    let m = tape.mean_axis(m, 1)?;
    let m = tape.reshape(m, &[shape[0], 1, 1, shape[3]])?;
    Ok(tape.broadcast(m, &shape)?)
}

pub(crate) fn rows3(data: &[f64]) -> Vec<Vec3> {
    data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}
