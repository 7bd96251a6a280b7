//! The full soft-rasterization pipeline as a single tape operation.
//!
//! Forward: project, bin faces into per-pixel candidate lists using
//! bounding boxes dilated by the blur radius, sort candidates by depth,
//! shade and composite. Per (pixel, face) shading is written once over
//! [`Scalar`] and re-run with [`Jet`]s for the layers that are kept, so the
//! backward pass differentiates exactly the code the forward pass ran.

use serde::{Deserialize, Serialize};
use softmesh_tensor::{Array, CustomOp, Tape, Var};

use super::composite::{layered_weights, sr_weights, Layer, LayerStack, SoftRasParams};
use super::distance::{query, signed_sq_distance};
use super::jet::{Jet, Scalar};
use super::occupancy::{occupancy_generic, occupancy_sr_generic};
use super::texture::{Taps, TextureView};
use crate::camera::Camera;
use crate::error::{invalid, Error, Result};
use crate::geometry::{TriMesh, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyKind {
    /// exp(min(0, nu / sigma))
    Exp,
    /// sigmoid(nu / sigma), the baseline
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Layered,
    SoftRas(SoftRasParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSettings {
    /// Blur in squared NDC units: the occupancy sees sign(nu) * nu^2 / sigma.
    pub sigma: f64,
    /// Layers per pixel including the background.
    pub max_layers: usize,
    /// Faces farther than `radius_factor * sqrt(sigma)` from a pixel are
    /// ignored for that pixel.
    pub radius_factor: f64,
    pub occupancy: OccupancyKind,
    pub aggregation: Aggregation,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            sigma: 1e-4,
            max_layers: 5,
            radius_factor: 3.0,
            occupancy: OccupancyKind::Exp,
            aggregation: Aggregation::Layered,
        }
    }
}

impl RenderSettings {
    pub fn with_sigma(self, sigma: f64) -> Self {
        RenderSettings { sigma, ..self }
    }

    /// Sigmoid occupancy with depth-softmax aggregation.
    pub fn soft_ras(self, params: SoftRasParams) -> Self {
        RenderSettings {
            occupancy: OccupancyKind::Sigmoid,
            aggregation: Aggregation::SoftRas(params),
            ..self
        }
    }

    pub fn radius(&self) -> f64 {
        self.radius_factor * self.sigma.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.radius_factor > 0.0) || self.max_layers < 2 {
            return Err(invalid(format!(
                "render settings need sigma > 0, radius_factor > 0, max_layers >= 2; got {self:?}"
            )));
        }
        if let Aggregation::SoftRas(p) = self.aggregation {
            if !(p.gamma > 0.0) || !(p.near < p.far) {
                return Err(invalid(format!("invalid depth-softmax parameters {p:?}")));
            }
        }
        Ok(())
    }
}

/// Counters of things the renderer silently worked around.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Faces whose projection is collinear; they are skipped.
    pub degenerate_faces: usize,
    /// Pixels that had more candidate faces than layers.
    pub truncated_pixels: usize,
    /// Pixels with at least one face layer.
    pub touched_pixels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Renderer {
    pub camera: Camera,
    pub settings: RenderSettings,
}

/// Output of [`Renderer::render`]: an `[H, W, 4]` node holding RGB and the
/// mask (one minus the background weight).
#[derive(Clone, Copy, Debug)]
pub struct Rendered {
    pub rgba: Var,
    pub diagnostics: Diagnostics,
}

impl Rendered {
    pub fn image(&self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.slice(self.rgba, 2, 0, 3)?)
    }

    pub fn mask(&self, tape: &mut Tape) -> Result<Var> {
        let m = tape.slice(self.rgba, 2, 3, 1)?;
        let s = tape.shape(m).to_vec();
        Ok(tape.reshape(m, &s[..2])?)
    }
}

struct ProjectedFace {
    ndc: [[f64; 2]; 3],
    z: [f64; 3],
    uv: [[f64; 2]; 3],
    degenerate: bool,
}

struct Sample<S> {
    occ: S,
    color: [S; 3],
    depth: S,
    taps: Taps<S>,
}

/// Shading of one face at one pixel. `pts` are the camera-space corners.
fn shade<S: Scalar>(
    pixel: [f64; 2],
    pts: [[S; 3]; 3],
    uv: &[[f64; 2]; 3],
    focal: f64,
    settings: &RenderSettings,
    tex: &TextureView,
) -> Option<Sample<S>> {
    let ndc = pts.map(|p| [p[0] * focal / p[2], p[1] * focal / p[2]]);
    let q = query(pixel, ndc)?;
    let nu = signed_sq_distance(&q);
    let occ = match settings.occupancy {
        OccupancyKind::Exp => occupancy_generic(nu, settings.sigma),
        OccupancyKind::Sigmoid => occupancy_sr_generic(nu, settings.sigma),
    };
    // barycentrics clamped onto the triangle, then perspective-corrected
    let b = q.bary.map(|w| w.clamp(0.0, 1.0));
    let s = b[0] + b[1] + b[2];
    let w = [0, 1, 2].map(|i| b[i] / (s * pts[i][2]));
    let total = w[0] + w[1] + w[2];
    let depth = S::cst(1.0) / total;
    let pw = w.map(|x| x / total);
    let mut u = S::cst(0.0);
    let mut v = S::cst(0.0);
    for i in 0..3 {
        u = u + pw[i] * uv[i][0];
        v = v + pw[i] * uv[i][1];
    }
    let taps = tex.taps(u, v);
    let mut color = [S::cst(0.0); 3];
    for &(t, wt) in &taps {
        let c = tex.texel(t);
        for k in 0..3 {
            color[k] = color[k] + wt * c[k];
        }
    }
    Some(Sample {
        occ,
        color,
        depth,
        taps,
    })
}

#[derive(Clone, Debug)]
struct LayerRec {
    face: u32,
    occ: f64,
    color: [f64; 3],
    depth: f64,
    taps: [(u32, f64); 4],
    d_occ: [f64; 9],
    d_color: [[f64; 9]; 3],
    d_depth: [f64; 9],
}

impl LayerRec {
    fn from_f64(face: usize, s: Sample<f64>) -> Self {
        LayerRec {
            face: face as u32,
            occ: s.occ,
            color: s.color,
            depth: s.depth,
            taps: s.taps.map(|(i, w)| (i as u32, w)),
            d_occ: [0.0; 9],
            d_color: [[0.0; 9]; 3],
            d_depth: [0.0; 9],
        }
    }

    fn from_jet(face: usize, s: Sample<Jet<9>>) -> Self {
        LayerRec {
            face: face as u32,
            occ: s.occ.v,
            color: s.color.map(|c| c.v),
            depth: s.depth.v,
            taps: s.taps.map(|(i, w)| (i as u32, w.v)),
            d_occ: s.occ.d,
            d_color: s.color.map(|c| c.d),
            d_depth: s.depth.d,
        }
    }
}

/// Per-pixel output and the partials of that output with respect to every
/// layer's occupancy, colour and depth, and to the background colour.
struct PixelJacobian {
    rgb: [f64; 3],
    mask: f64,
    /// d rgb_c / d O_l and d mask / d O_l
    d_occ: Vec<[f64; 4]>,
    /// d rgb_c / d C_l,c (same for each channel)
    d_color: Vec<f64>,
    /// d rgb_c / d z_l and d mask / d z_l
    d_depth: Vec<[f64; 4]>,
    d_bg: f64,
}

fn composite_pixel(layers: &[LayerRec], bg: [f64; 3], agg: &Aggregation) -> PixelJacobian {
    let n = layers.len();
    match agg {
        Aggregation::Layered => {
            let occ: Vec<f64> = layers.iter().map(|l| l.occ).collect();
            let w = layered_weights(&occ);
            let mut rgb = [0.0; 3];
            for (l, wl) in layers.iter().zip(&w) {
                for c in 0..3 {
                    rgb[c] += wl * l.color[c];
                }
            }
            for c in 0..3 {
                rgb[c] += w[n] * bg[c];
            }
            // transmittance before each layer, and what lies behind it
            let mut trans = vec![1.0; n + 1];
            for i in 0..n {
                trans[i + 1] = trans[i] * (1.0 - occ[i]);
            }
            let mut behind = vec![[0.0; 4]; n + 1];
            behind[n] = [bg[0], bg[1], bg[2], 0.0];
            for i in (0..n).rev() {
                for c in 0..3 {
                    behind[i][c] = occ[i] * layers[i].color[c] + (1.0 - occ[i]) * behind[i + 1][c];
                }
                behind[i][3] = occ[i] + (1.0 - occ[i]) * behind[i + 1][3];
            }
            let d_occ = (0..n)
                .map(|i| {
                    let mut g = [0.0; 4];
                    for c in 0..3 {
                        g[c] = trans[i] * (layers[i].color[c] - behind[i + 1][c]);
                    }
                    g[3] = trans[i] * (1.0 - behind[i + 1][3]);
                    g
                })
                .collect();
            PixelJacobian {
                rgb,
                mask: 1.0 - w[n],
                d_occ,
                d_color: w[..n].to_vec(),
                d_depth: vec![[0.0; 4]; n],
                d_bg: w[n],
            }
        }
        Aggregation::SoftRas(p) => {
            let occ: Vec<f64> = layers.iter().map(|l| l.occ).collect();
            let z: Vec<f64> = layers.iter().map(|l| l.depth).collect();
            let (w, e, total) = sr_weights(&occ, &z, p);
            let mut rgb = [0.0; 3];
            for (l, wl) in layers.iter().zip(&w) {
                for c in 0..3 {
                    rgb[c] += wl * l.color[c];
                }
            }
            for c in 0..3 {
                rgb[c] += w[n] * bg[c];
            }
            let mask = 1.0 - w[n];
            let dz_scale = -1.0 / ((p.far - p.near) * p.gamma);
            let mut d_occ = Vec::with_capacity(n);
            let mut d_depth = Vec::with_capacity(n);
            for i in 0..n {
                // d out / d (unnormalized weight) = (X_i - out) / total
                let mut g = [0.0; 4];
                for c in 0..3 {
                    g[c] = (layers[i].color[c] - rgb[c]) / total;
                }
                g[3] = (1.0 - mask) / total;
                d_occ.push(g.map(|x| x * e[i]));
                d_depth.push(g.map(|x| x * occ[i] * e[i] * dz_scale));
            }
            PixelJacobian {
                rgb,
                mask,
                d_occ,
                d_color: w[..n].to_vec(),
                d_depth,
                d_bg: w[n],
            }
        }
    }
}

struct RenderOp {
    faces: Vec<[usize; 3]>,
    pixels: Vec<Vec<LayerRec>>,
    aggregation: Aggregation,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let (verts, tex, bg) = (inputs[0], inputs[1], inputs[2]);
        let mut g_verts = Array::zeros(verts.shape().to_vec());
        let mut g_tex = Array::zeros(tex.shape().to_vec());
        let mut g_bg = Array::zeros(bg.shape().to_vec());
        let g = grad.data();
        let bgd = bg.data();
        for (p, layers) in self.pixels.iter().enumerate() {
            let go = [g[4 * p], g[4 * p + 1], g[4 * p + 2], g[4 * p + 3]];
            if go.iter().all(|&x| x == 0.0) {
                continue;
            }
            let b = [bgd[3 * p], bgd[3 * p + 1], bgd[3 * p + 2]];
            let jac = composite_pixel(layers, b, &self.aggregation);
            for c in 0..3 {
                g_bg.data_mut()[3 * p + c] += go[c] * jac.d_bg;
            }
            for (i, l) in layers.iter().enumerate() {
                let g_o: f64 = (0..4).map(|k| go[k] * jac.d_occ[i][k]).sum();
                let g_z: f64 = (0..4).map(|k| go[k] * jac.d_depth[i][k]).sum();
                let g_c = [0, 1, 2].map(|c| go[c] * jac.d_color[i]);
                for &(t, w) in &l.taps {
                    for c in 0..3 {
                        g_tex.data_mut()[3 * t as usize + c] += g_c[c] * w;
                    }
                }
                let face = self.faces[l.face as usize];
                let gv = g_verts.data_mut();
                for j in 0..9 {
                    let mut s = g_o * l.d_occ[j] + g_z * l.d_depth[j];
                    for c in 0..3 {
                        s += g_c[c] * l.d_color[c][j];
                    }
                    gv[3 * face[j / 3] + j % 3] += s;
                }
            }
        }
        vec![Some(g_verts), Some(g_tex), Some(g_bg)]
    }
}

impl Renderer {
    pub fn new(camera: Camera, settings: RenderSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Renderer { camera, settings })
    }

    fn project_faces(&self, verts: &[f64], faces: &[[usize; 3]], uv: &[[f64; 2]]) -> Result<Vec<ProjectedFace>> {
        let n = verts.len() / 3;
        if uv.len() != n {
            return Err(invalid(format!("{} uv coordinates for {n} vertices", uv.len())));
        }
        let pts: Vec<Vec3> = verts.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let proj = self.camera.project(&pts)?;
        faces
            .iter()
            .enumerate()
            .map(|(fi, f)| {
                if f.iter().any(|&i| i >= n) {
                    return Err(Error::Mesh(format!("face {fi} indexes past {n} vertices")));
                }
                let ndc = f.map(|i| proj[i].0);
                let z = f.map(|i| proj[i].1);
                let mut uv = f.map(|i| uv[i]);
                let (lo, hi) = uv.iter().fold((f64::MAX, f64::MIN), |(a, b), t| (a.min(t[0]), b.max(t[0])));
                if hi - lo > 0.5 {
                    // seam face: move the small side past 1 so interpolation
                    // runs the short way around
                    for t in &mut uv {
                        if t[0] < 0.5 {
                            t[0] += 1.0;
                        }
                    }
                }
                let area2 = (ndc[1][0] - ndc[0][0]) * (ndc[2][1] - ndc[0][1])
                    - (ndc[1][1] - ndc[0][1]) * (ndc[2][0] - ndc[0][0]);
                Ok(ProjectedFace {
                    ndc,
                    z,
                    uv,
                    degenerate: !(area2.abs() > super::distance::DEGENERATE_AREA),
                })
            })
            .collect()
    }

    /// Candidate faces of every pixel from dilated bounding boxes.
    fn bin_faces(&self, faces: &[ProjectedFace]) -> Vec<Vec<u32>> {
        let cam = &self.camera;
        let (w, h) = (cam.width, cam.height);
        let r = self.settings.radius();
        let mut bins = vec![Vec::new(); w * h];
        for (fi, f) in faces.iter().enumerate() {
            if f.degenerate {
                continue;
            }
            let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for p in &f.ndc {
                x0 = x0.min(p[0]);
                x1 = x1.max(p[0]);
                y0 = y0.min(p[1]);
                y1 = y1.max(p[1]);
            }
            let col_lo = ((x0 - r + 1.0) / 2.0 * w as f64 - 0.5).ceil().max(0.0);
            let col_hi = ((x1 + r + 1.0) / 2.0 * w as f64 - 0.5).floor().min(w as f64 - 1.0);
            let row_lo = ((1.0 - (y1 + r)) / 2.0 * h as f64 - 0.5).ceil().max(0.0);
            let row_hi = ((1.0 - (y0 - r)) / 2.0 * h as f64 - 0.5).floor().min(h as f64 - 1.0);
            if col_lo > col_hi || row_lo > row_hi {
                continue;
            }
            for row in row_lo as usize..=row_hi as usize {
                for col in col_lo as usize..=col_hi as usize {
                    bins[row * w + col].push(fi as u32);
                }
            }
        }
        bins
    }

    /// Front-to-back candidate list of one pixel after cutoff, sorting and
    /// truncation. Returns the kept faces and whether any were dropped.
    fn select(&self, pixel: [f64; 2], cands: &[u32], faces: &[ProjectedFace]) -> (Vec<usize>, bool) {
        let r2 = self.settings.radius().powi(2);
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(cands.len());
        for &fi in cands {
            let f = &faces[fi as usize];
            let Some(q) = query(pixel, f.ndc) else { continue };
            if !q.inside && q.dist_sq > r2 {
                continue;
            }
            let key = if q.inside {
                let b = q.bary;
                let inv: f64 = (0..3).map(|i| b[i] / f.z[i]).sum();
                1.0 / inv
            } else {
                (f.z[0] + f.z[1] + f.z[2]) / 3.0
            };
            keyed.push((key, fi as usize));
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let cap = self.settings.max_layers - 1;
        let truncated = keyed.len() > cap;
        keyed.truncate(cap);
        (keyed.into_iter().map(|(_, f)| f).collect(), truncated)
    }

    fn check_inputs(&self, tex: &Array, bg: &Array) -> Result<()> {
        if tex.ndim() != 3 || tex.shape()[2] != 3 || tex.shape()[0] == 0 || tex.shape()[1] == 0 {
            return Err(invalid(format!("texture must be [H, W, 3], got {:?}", tex.shape())));
        }
        let want = [self.camera.height, self.camera.width, 3];
        if bg.shape() != want {
            return Err(invalid(format!("background must be {want:?}, got {:?}", bg.shape())));
        }
        Ok(())
    }

    fn rasterize_records(
        &self,
        verts: &Array,
        faces: &[[usize; 3]],
        uv: &[[f64; 2]],
        tex: &Array,
        bg: &Array,
        with_jets: bool,
    ) -> Result<(Vec<Vec<LayerRec>>, Diagnostics)> {
        if verts.ndim() != 2 || verts.shape()[1] != 3 {
            return Err(invalid(format!("vertices must be N×3, got {:?}", verts.shape())));
        }
        self.check_inputs(tex, bg)?;
        let proj = self.project_faces(verts.data(), faces, uv)?;
        let bins = self.bin_faces(&proj);
        let tview = TextureView::new(tex.shape()[0], tex.shape()[1], tex.data());
        let vd = verts.data();
        let focal = self.camera.focal;
        let mut diag = Diagnostics {
            degenerate_faces: proj.iter().filter(|f| f.degenerate).count(),
            ..Default::default()
        };
        let mut out = Vec::with_capacity(bins.len());
        for (p, cands) in bins.iter().enumerate() {
            let pixel = self.camera.pixel_center(p % self.camera.width, p / self.camera.width);
            let (kept, truncated) = self.select(pixel, cands, &proj);
            diag.truncated_pixels += truncated as usize;
            diag.touched_pixels += !kept.is_empty() as usize;
            let mut layers = Vec::with_capacity(kept.len());
            for fi in kept {
                let f = faces[fi];
                let uvs = &proj[fi].uv;
                let rec = if with_jets {
                    let pts = [0, 1, 2].map(|k| [0, 1, 2].map(|c| Jet::<9>::var(vd[3 * f[k] + c], 3 * k + c)));
                    shade(pixel, pts, uvs, focal, &self.settings, &tview).map(|s| LayerRec::from_jet(fi, s))
                } else {
                    let pts = [0, 1, 2].map(|k| [0, 1, 2].map(|c| vd[3 * f[k] + c]));
                    shade(pixel, pts, uvs, focal, &self.settings, &tview).map(|s| LayerRec::from_f64(fi, s))
                };
                // selection already rejected degenerate faces, so this
                // always succeeds
                layers.extend(rec);
            }
            out.push(layers);
        }
        Ok((out, diag))
    }

    /// Renders camera-space vertices (`[N, 3]`) with the given texture
    /// (`[Ht, Wt, 3]`) over `background` (`[H, W, 3]`). Gradients flow to
    /// all three inputs.
    pub fn render(
        &self,
        tape: &mut Tape,
        verts: Var,
        faces: &[[usize; 3]],
        uv: &[[f64; 2]],
        texture: Var,
        background: Var,
    ) -> Result<Rendered> {
        let with_jets = tape.requires_grad(verts);
        let (pixels, diagnostics) = self.rasterize_records(
            tape.value(verts),
            faces,
            uv,
            tape.value(texture),
            tape.value(background),
            with_jets,
        )?;
        let (w, h) = (self.camera.width, self.camera.height);
        let bgd = tape.value(background).data();
        let mut data = Vec::with_capacity(w * h * 4);
        for (p, layers) in pixels.iter().enumerate() {
            let b = [bgd[3 * p], bgd[3 * p + 1], bgd[3 * p + 2]];
            let jac = composite_pixel(layers, b, &self.settings.aggregation);
            data.extend_from_slice(&[jac.rgb[0], jac.rgb[1], jac.rgb[2], jac.mask]);
        }
        let value = Array::new([h, w, 4], data)?;
        let op = RenderOp {
            faces: faces.to_vec(),
            pixels,
            aggregation: self.settings.aggregation,
        };
        let rgba = tape.custom(&[verts, texture, background], value, Box::new(op));
        Ok(Rendered { rgba, diagnostics })
    }

    /// Renders a camera-space mesh without recording gradients; returns
    /// `[H, W, 3]` colors and the `[H, W]` mask.
    pub fn render_mesh(&self, mesh: &TriMesh, texture: &Array, background: &Array) -> Result<(Array, Array, Diagnostics)> {
        let mut tape = Tape::new();
        let v = tape.constant(Array::new([mesh.num_vertices(), 3], mesh.vertex_data())?);
        let t = tape.constant(texture.clone());
        let b = tape.constant(background.clone());
        let r = self.render(&mut tape, v, mesh.faces(), mesh.uv(), t, b)?;
        let img = r.image(&mut tape)?;
        let mask = r.mask(&mut tape)?;
        Ok((tape.value(img).clone(), tape.value(mask).clone(), r.diagnostics))
    }

    /// The per-pixel layers the renderer would composite.
    pub fn layer_stack(&self, mesh: &TriMesh, texture: &Array, background: &Array) -> Result<(LayerStack, Diagnostics)> {
        let verts = Array::new([mesh.num_vertices(), 3], mesh.vertex_data())?;
        let (pixels, diag) = self.rasterize_records(&verts, mesh.faces(), mesh.uv(), texture, background, false)?;
        let pixels = pixels
            .into_iter()
            .map(|ls| {
                ls.into_iter()
                    .map(|l| Layer {
                        face: l.face as usize,
                        occupancy: l.occ,
                        color: l.color,
                        depth: l.depth,
                    })
                    .collect()
            })
            .collect();
        let background = background.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok((
            LayerStack {
                width: self.camera.width,
                height: self.camera.height,
                pixels,
                background,
            },
            diag,
        ))
    }
}

/// A `[H, W, 3]` image filled with one color.
pub fn solid_image(height: usize, width: usize, color: [f64; 3]) -> Array {
    let data = (0..height * width).flat_map(|_| color).collect();
    Array::new([height, width, 3], data).unwrap()
}

/// Binary `[H, W]` coverage of a camera-space mesh at pixel centers.
pub fn hard_silhouette(camera: Camera, mesh: &TriMesh) -> Result<Array> {
    let settings = RenderSettings {
        max_layers: 2,
        ..RenderSettings::default().with_sigma(1e-12)
    };
    let r = Renderer::new(camera, settings)?;
    let tex = solid_image(1, 1, [1.0; 3]);
    let bg = solid_image(camera.height, camera.width, [0.0; 3]);
    let (_, mask, _) = r.render_mesh(mesh, &tex, &bg)?;
    Ok(mask.map(|m| if m >= 0.5 { 1.0 } else { 0.0 }))
}
