//! Self-checks run by the command line and the acceptance suite: finite
//! difference checks of every differentiable operation, and the depth
//! softmax gradient pathology on a single far triangle.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softmesh_tensor::nn::{conv3x3, global_avg_pool, permute, upsample2x};
use softmesh_tensor::{check_gradients, Array, GradCheckOptions, Tape, Var};

use crate::camera::Camera;
use crate::error::Result;
use crate::evaluation::rotation_tape;
use crate::geometry::{
    cross_rows, laplacian_loss_tape, make_ellipsoid, normal_consistency_loss_tape, MeshTopology, TriMesh,
};
use crate::losses::{rec_loss, uniformity_loss, BinomialPyramid};
use crate::model::{apply_affine, average_image, euler_matrix_tape, mask_code, Instance};
use crate::rasterizer::{composite_sr, solid_image, Layer, LayerStack, RenderSettings, Renderer, SoftRasParams};

/// Tolerance on the relative error of smooth operations.
pub const SMOOTH_TOL: f64 = 1e-4;
/// Tolerance for losses through the renderer, whose soft edges are only
/// piecewise smooth.
pub const RENDER_TOL: f64 = 1e-2;
/// Blur used for rendering gradient checks.
pub const CHECK_SIGMA: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub group: &'static str,
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Fixed random weighting so that a scalar loss sees every output element.
fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let shape = t.shape(y).to_vec();
    let w = t.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

struct Runner {
    group: &'static str,
    tolerance: f64,
    out: Vec<SuiteResult>,
}

impl Runner {
    fn new(group: &'static str, tolerance: f64) -> Self {
        Runner {
            group,
            tolerance,
            out: Vec::new(),
        }
    }

    /// Checks `f` with its output reduced by a random weighting.
    fn op(&mut self, name: &str, inputs: Vec<Array>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<()> {
        self.loss(name, inputs, |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y)
        })
    }

    /// Checks a scalar loss as is.
    fn loss(&mut self, name: &str, inputs: Vec<Array>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<()> {
        let start = Instant::now();
        let report = check_gradients(f, &inputs, GradCheckOptions::default())?;
        self.out.push(SuiteResult {
            group: self.group,
            name: name.to_string(),
            max_rel_err: report.max_rel_err,
            tolerance: self.tolerance,
            checked: report.checked,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(())
    }
}

/// Every tape primitive and image operation.
pub fn primitive_suites() -> Result<Vec<SuiteResult>> {
    let mut r = Runner::new("primitive", SMOOTH_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4], -2.0, 2.0);
    let b = random(&mut rng, &[3, 4], 0.5, 2.0);
    let row = random(&mut rng, &[4], 0.5, 2.0);
    r.op("add", vec![a.clone(), b.clone()], |t, v| Ok(t.add(v[0], v[1])?))?;
    r.op("sub", vec![a.clone(), b.clone()], |t, v| Ok(t.sub(v[0], v[1])?))?;
    r.op("mul", vec![a.clone(), b.clone()], |t, v| Ok(t.mul(v[0], v[1])?))?;
    r.op("div", vec![a.clone(), b.clone()], |t, v| Ok(t.div(v[0], v[1])?))?;
    r.op("atan2", vec![a.clone(), b.clone()], |t, v| Ok(t.atan2(v[0], v[1])?))?;
    r.op("broadcast mul", vec![a.clone(), row.clone()], |t, v| Ok(t.mul(v[0], v[1])?))?;
    r.op("broadcast div", vec![a.clone(), row], |t, v| Ok(t.div(v[0], v[1])?))?;

    let x = random(&mut rng, &[10], -2.0, 2.0);
    let pos = random(&mut rng, &[10], 0.2, 3.0);
    r.op("exp", vec![x.clone()], |t, v| Ok(t.exp(v[0])))?;
    r.op("log", vec![pos.clone()], |t, v| Ok(t.log(v[0])))?;
    r.op("sqrt", vec![pos.clone()], |t, v| Ok(t.sqrt(v[0])))?;
    r.op("pow", vec![pos], |t, v| Ok(t.pow(v[0], 2.7)))?;
    r.op("tanh", vec![x.clone()], |t, v| Ok(t.tanh(v[0])))?;
    r.op("sigmoid", vec![x.clone()], |t, v| Ok(t.sigmoid(v[0])))?;
    r.op("sin", vec![x.clone()], |t, v| Ok(t.sin(v[0])))?;
    r.op("cos", vec![x.clone()], |t, v| Ok(t.cos(v[0])))?;
    r.op("affine", vec![x.clone()], |t, v| Ok(t.affine(v[0], -3.0, 0.5)))?;
    // keep clear of the kinks at 0, 0.1, -0.3 and +-1
    let away = x.map(|v| {
        let near = [0.0, 0.1, -0.3, 1.0, -1.0].iter().any(|k| (v - k).abs() < 1e-3);
        if near {
            v + 0.01
        } else {
            v
        }
    });
    r.op("abs", vec![away.clone()], |t, v| Ok(t.abs(v[0])))?;
    r.op("max", vec![away.clone()], |t, v| Ok(t.max_scalar(v[0], 0.1)))?;
    r.op("min", vec![away.clone()], |t, v| Ok(t.min_scalar(v[0], -0.3)))?;
    r.op("clamp", vec![away.clone()], |t, v| Ok(t.clamp(v[0], -1.0, 1.0)?))?;
    r.op("leaky relu", vec![away.clone()], |t, v| Ok(t.leaky_relu(v[0], 0.2)))?;
    r.op("relu", vec![away], |t, v| Ok(t.relu(v[0])))?;

    let m = random(&mut rng, &[3, 5], -1.0, 1.0);
    let n = random(&mut rng, &[5, 2], -1.0, 1.0);
    let c = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    r.op("matmul", vec![m.clone(), n], |t, v| Ok(t.matmul(v[0], v[1])?))?;
    r.op("transpose", vec![m.clone()], |t, v| Ok(t.transpose(v[0])?))?;
    r.op("sum", vec![c.clone()], |t, v| Ok(t.sum(v[0])))?;
    r.op("mean", vec![c.clone()], |t, v| Ok(t.mean(v[0])))?;
    for axis in 0..3 {
        r.op(&format!("sum axis {axis}"), vec![c.clone()], move |t, v| Ok(t.sum_axis(v[0], axis)?))?;
        r.op(&format!("mean axis {axis}"), vec![c.clone()], move |t, v| Ok(t.mean_axis(v[0], axis)?))?;
    }
    r.op("broadcast", vec![random(&mut rng, &[3, 1], -1.0, 1.0)], |t, v| Ok(t.broadcast(v[0], &[2, 3, 4])?))?;
    r.op("softmax", vec![m], |t, v| Ok(t.softmax(v[0])?))?;

    let p = random(&mut rng, &[5, 3], -1.0, 1.0);
    let q = random(&mut rng, &[5, 2], -1.0, 1.0);
    r.op("gather", vec![p.clone()], |t, v| Ok(t.gather(v[0], &[4, 0, 0, 2, 4, 4])?))?;
    r.op("scatter add", vec![p.clone()], |t, v| Ok(t.scatter_add(v[0], &[1, 1, 0, 6, 1], 7)?))?;
    r.op("concat", vec![p.clone(), q], |t, v| Ok(t.concat(&[v[0], v[1], v[0]], 1)?))?;
    r.op("slice", vec![p.clone()], |t, v| Ok(t.slice(v[0], 1, 1, 2)?))?;
    r.op("reshape", vec![p], |t, v| Ok(t.reshape(v[0], &[3, 5])?))?;
    r.op("index and stack", vec![random(&mut rng, &[4], -1.0, 1.0)], |t, v| {
        let a = t.index(v[0], 3)?;
        let b = t.index(v[0], 1)?;
        let ab = t.mul(a, b)?;
        Ok(t.stack(&[ab, a, b])?)
    })?;

    let img = random(&mut rng, &[2, 3, 6, 5], -1.0, 1.0);
    let w = random(&mut rng, &[4, 27], -0.5, 0.5);
    let bias = random(&mut rng, &[4], -0.5, 0.5);
    for stride in [1, 2] {
        r.op(&format!("conv3x3 stride {stride}"), vec![img.clone(), w.clone(), bias.clone()], move |t, v| {
            Ok(conv3x3(t, v[0], v[1], v[2], stride)?)
        })?;
    }
    r.op("upsample2x", vec![img.clone()], |t, v| Ok(upsample2x(t, v[0])?))?;
    r.op("global average pool", vec![img.clone()], |t, v| Ok(global_avg_pool(t, v[0])?))?;
    r.op("permute", vec![img], |t, v| Ok(permute(t, v[0], &[0, 2, 3, 1])?))?;
    Ok(r.out)
}

fn instance(t: &mut Tape, scale: Var, angles: Var, translation: Var) -> Result<Instance> {
    let z = t.constant(Array::zeros([1, 1]));
    let scale = t.reshape(scale, &[1, 3])?;
    Ok(Instance {
        z_sh: z,
        scale,
        z_tx: z,
        z_bg: None,
        azimuth: t.index(angles, 0)?,
        elevation: t.index(angles, 1)?,
        roll: t.index(angles, 2)?,
        translation,
    })
}

fn mesh_array(mesh: &TriMesh) -> Array {
    Array::new([mesh.num_vertices(), 3], mesh.vertex_data()).unwrap()
}

/// Geometry, pose and loss operations built from the primitives.
pub fn model_suites() -> Result<Vec<SuiteResult>> {
    let mut r = Runner::new("model", SMOOTH_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cam = Camera::synthetic(16);
    let mut pts = random(&mut rng, &[6, 3], -0.5, 0.5);
    for i in 0..6 {
        pts.data_mut()[3 * i + 2] += 2.7;
    }
    r.op("camera projection", vec![pts], |t, v| {
        let (ndc, depth) = cam.project_tape(t, v[0])?;
        let d = t.reshape(depth, &[6, 1])?;
        Ok(t.concat(&[ndc, d], 1)?)
    })?;
    r.op("euler rotation", vec![random(&mut rng, &[3], -3.0, 3.0)], |t, v| {
        let a = t.index(v[0], 0)?;
        let e = t.index(v[0], 1)?;
        let ro = t.index(v[0], 2)?;
        euler_matrix_tape(t, a, e, ro)
    })?;
    let verts = random(&mut rng, &[7, 3], -1.0, 1.0);
    r.op(
        "affine transform",
        vec![
            verts,
            random(&mut rng, &[3], 0.5, 1.5),
            random(&mut rng, &[3], -3.0, 3.0),
            random(&mut rng, &[3], -0.5, 0.5),
        ],
        |t, v| {
            let inst = instance(t, v[1], v[2], v[3])?;
            apply_affine(t, v[0], &inst)
        },
    )?;
    r.op("6d rotation", vec![random(&mut rng, &[6], -1.0, 1.0)], |t, v| rotation_tape(t, v[0]))?;
    r.op("cross product", vec![random(&mut rng, &[4, 3], -1.0, 1.0), random(&mut rng, &[4, 3], -1.0, 1.0)], |t, v| {
        cross_rows(t, v[0], v[1])
    })?;

    let mesh = make_ellipsoid(1, [1.0, 0.7, 0.7], 0.4)?;
    let topo = MeshTopology::new(&mesh)?;
    let bumpy = mesh_array(&mesh).map(|x| x * (1.0 + 0.1 * (7.0 * x).sin()));
    r.loss("laplacian smoothing", vec![bumpy.clone()], |t, v| laplacian_loss_tape(t, v[0], &topo))?;
    r.loss("normal consistency", vec![bumpy], |t, v| normal_consistency_loss_tape(t, v[0], &topo))?;

    let (a, b) = (random(&mut rng, &[8, 8, 3], 0.0, 1.0), random(&mut rng, &[8, 8, 3], 0.0, 1.0));
    r.loss("reconstruction with pyramid", vec![a, b], |t, v| {
        Ok(rec_loss(t, v[0], v[1], &BinomialPyramid::default(), 10.0)?.total)
    })?;
    // rows away from 1/K so the absolute value is smooth
    let probs = Array::from_rows(&[[0.7, 0.2, 0.1], [0.5, 0.1, 0.4]]);
    r.loss("uniformity", vec![probs], |t, v| uniformity_loss(t, v[0]))?;
    r.op("texture averaging", vec![random(&mut rng, &[2, 4, 5, 3], 0.0, 1.0)], |t, v| average_image(t, v[0]))?;
    r.op("code masking", vec![random(&mut rng, &[2, 6], -1.0, 1.0)], |t, v| mask_code(t, v[0], 4))?;
    Ok(r.out)
}

fn check_renderer() -> Result<Renderer> {
    let settings = RenderSettings {
        // a wide cutoff keeps the truncation jump far below the
        // finite-difference resolution
        radius_factor: 6.0,
        ..RenderSettings::default().with_sigma(CHECK_SIGMA)
    };
    Renderer::new(Camera::synthetic(16), settings)
}

/// Pixel loss of 16x16 renders with respect to vertices, texture,
/// background and pose.
pub fn render_suites() -> Result<Vec<SuiteResult>> {
    let mut r = Runner::new("render", RENDER_TOL);
    let renderer = check_renderer()?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let template = make_ellipsoid(1, [1.0, 0.7, 0.7], 0.4)?;
    let (faces, uv) = (template.faces().to_vec(), template.uv().to_vec());
    let target = random(&mut rng, &[16, 16, 4], 0.0, 1.0);
    let tex = random(&mut rng, &[6, 8, 3], 0.0, 1.0);
    let bg = random(&mut rng, &[16, 16, 3], 0.0, 1.0);
    let pixel_loss = |t: &mut Tape, rgba: Var| -> Result<Var> {
        let tg = t.constant(target.clone());
        let d = t.sub(rgba, tg)?;
        let d = t.square(d);
        Ok(t.mean(d))
    };
    // a generic pose: mirror-symmetric placements create exact depth ties
    let scale = Array::from_vec(vec![1.1, 0.9, 1.2]);
    let angles = Array::from_vec(vec![0.7, 0.45, 0.1]);
    let trans = Array::from_vec(vec![0.03, -0.05, 2.732]);
    let posed = {
        let mut t = Tape::new();
        let x = t.constant(mesh_array(&template));
        let s = t.constant(scale.clone());
        let a = t.constant(angles.clone());
        let tr = t.constant(trans.clone());
        let inst = instance(&mut t, s, a, tr)?;
        let y = apply_affine(&mut t, x, &inst)?;
        t.value(y).clone()
    };
    r.loss("vertices, texture and background", vec![posed, tex.clone(), bg], |t, v| {
        let out = renderer.render(t, v[0], &faces, &uv, v[1], v[2])?;
        pixel_loss(t, out.rgba)
    })?;
    r.loss("scale, angles and translation", vec![scale, angles, trans], |t, v| {
        let inst = instance(t, v[0], v[1], v[2])?;
        let x = t.constant(mesh_array(&template));
        let posed = apply_affine(t, x, &inst)?;
        let tx = t.constant(tex.clone());
        let bg = t.constant(Array::ones([16, 16, 3]));
        let out = renderer.render(t, posed, &faces, &uv, tx, bg)?;
        pixel_loss(t, out.rgba)
    })?;
    Ok(r.out)
}

pub fn all_suites() -> Result<Vec<SuiteResult>> {
    let mut out = primitive_suites()?;
    out.extend(model_suites()?);
    out.extend(render_suites()?);
    Ok(out)
}

/// Depth-softmax aggregation on one far triangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathologyReport {
    pub depth: f64,
    /// (far - depth) / (far - near).
    pub normalized_depth: f64,
    /// Occupancy given to the single-layer compositing check.
    pub occupancy: f64,
    /// |C_SR - face color| for that single layer.
    pub composite_error: f64,
    /// Smallest softmax-path occupancy among rendered face layers.
    pub min_rendered_occupancy: f64,
    /// Largest |C_SR - face color| over pixels with occupancy >= `occupancy`.
    pub render_error: f64,
    /// Norms of the pixel-loss gradient with respect to the vertices.
    pub layered_grad: f64,
    pub softras_grad: f64,
}

impl PathologyReport {
    /// How much larger the layered gradient is; infinite if the depth
    /// softmax gradient underflows to zero.
    pub fn ratio(&self) -> f64 {
        self.layered_grad / self.softras_grad
    }
}

pub const PATHOLOGY_OCCUPANCY: f64 = 4e-4;
pub const PATHOLOGY_NORMALIZED_DEPTH: f64 = 5e-3;

/// A red triangle near the far plane over white, fitted to a target where
/// it sits a few pixels to the right.
pub fn sr_pathology() -> Result<PathologyReport> {
    let p = SoftRasParams::default();
    let depth = p.far - PATHOLOGY_NORMALIZED_DEPTH * (p.far - p.near);
    let color = [1.0, 0.0, 0.0];
    let white = [1.0; 3];

    let stack = LayerStack {
        width: 1,
        height: 1,
        pixels: vec![vec![Layer {
            face: 0,
            occupancy: PATHOLOGY_OCCUPANCY,
            color,
            depth,
        }]],
        background: vec![white],
    };
    let (c, _) = composite_sr(&stack, &p);
    let composite_error = (0..3).map(|k| (c[0][k] - color[k]).abs()).fold(0.0, f64::max);

    let size = 32;
    let cam = Camera::synthetic(size);
    // about half the image wide at this depth
    let s = 0.5 * depth / cam.focal;
    let tri = |dx: f64| {
        TriMesh::new(
            vec![[-s + dx, -0.8 * s, depth], [s + dx, -0.8 * s, depth], [0.2 * s + dx, s, depth]],
            vec![[0, 1, 2]],
            vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]],
        )
    };
    let mesh = tri(0.0)?;
    let texture = solid_image(2, 2, color);
    let background = solid_image(size, size, white);
    let layered = Renderer::new(cam, RenderSettings::default())?;
    let softras = Renderer::new(cam, RenderSettings::default().soft_ras(p))?;

    let hard = Renderer::new(cam, RenderSettings::default().with_sigma(1e-12))?;
    let (target, _, _) = hard.render_mesh(&tri(0.2 * s)?, &texture, &background)?;

    let (sr_stack, _) = softras.layer_stack(&mesh, &texture, &background)?;
    let (sr_image, _) = composite_sr(&sr_stack, &p);
    let mut min_occ = f64::INFINITY;
    let mut render_error: f64 = 0.0;
    for (layers, px) in sr_stack.pixels.iter().zip(&sr_image) {
        if let Some(o) = layers.iter().map(|l| l.occupancy).reduce(f64::max) {
            min_occ = min_occ.min(o);
            if o >= PATHOLOGY_OCCUPANCY {
                render_error = render_error.max((0..3).map(|k| (px[k] - color[k]).abs()).fold(0.0, f64::max));
            }
        }
    }

    let grad_norm = |renderer: &Renderer| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(mesh_array(&mesh));
        let tx = t.constant(texture.clone());
        let bg = t.constant(background.clone());
        let out = renderer.render(&mut t, v, mesh.faces(), mesh.uv(), tx, bg)?;
        let img = out.image(&mut t)?;
        let tg = t.constant(target.clone());
        let d = t.sub(img, tg)?;
        let d = t.square(d);
        let l = t.mean(d);
        let g = t.backward(l)?.get(v);
        Ok(g.data().iter().map(|x| x * x).sum::<f64>().sqrt())
    };

    Ok(PathologyReport {
        depth,
        normalized_depth: PATHOLOGY_NORMALIZED_DEPTH,
        occupancy: PATHOLOGY_OCCUPANCY,
        composite_error,
        min_rendered_occupancy: min_occ,
        render_error,
        layered_grad: grad_norm(&layered)?,
        softras_grad: grad_norm(&softras)?,
    })
}
