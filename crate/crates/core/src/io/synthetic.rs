//! Procedural scenes rendered by the engine itself.
//!
//! Every object is built on the unit icosphere so it carries the same
//! spherical UVs as the reference ellipsoid. Views orbit the object in
//! azimuth at a fixed elevation and distance, matching the synthetic pose
//! ranges of the model.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use softmesh_tensor::Array;

use super::dataset::{Dataset, GroundTruth, GtMesh, GtRecord, ImageSet, PoseRecord};
use crate::camera::Camera;
use crate::error::{invalid, Result};
use crate::geometry::{icosphere, spherical_uv, TriMesh, Vec3};
use crate::model::PoseRanges;
use crate::rasterizer::{solid_image, texel_center_uv, RenderSettings, Renderer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneFamily {
    /// Ellipsoids with random axes and low-frequency radial bumps.
    Ellipsoids,
    /// Two intersecting boxes of random size.
    TwoBoxes,
    /// Alternating ellipsoids and elongated boxes.
    EllipsoidAndBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipsoid,
    TwoBoxes,
    ElongatedBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub family: SceneFamily,
    pub instances: usize,
    pub views: usize,
    pub image_size: usize,
    pub texture_size: usize,
    pub subdivisions: usize,
    pub elevation_deg: f64,
    pub distance: f64,
    /// Blur small enough that coverage is binary at every pixel center.
    pub sigma: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// One ellipsoid seen from 24 azimuths at 64x64.
    fn default() -> Self {
        let ranges = PoseRanges::synthetic();
        SyntheticSpec {
            family: SceneFamily::Ellipsoids,
            instances: 1,
            views: 24,
            image_size: 64,
            texture_size: 64,
            subdivisions: 3,
            elevation_deg: ranges.elevation_deg.center,
            distance: ranges.tz.center,
            sigma: 1e-12,
            background: [1.0; 3],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.views == 0 {
            return Err(invalid("need at least one instance and one view"));
        }
        if self.image_size == 0 || self.texture_size == 0 {
            return Err(invalid("image and texture sizes must be positive"));
        }
        if !(self.sigma > 0.0) || !(self.distance > 1.0) {
            return Err(invalid("need sigma > 0 and the object beyond the near plane"));
        }
        Ok(())
    }

    /// Azimuths in degrees, uniformly spaced from 0.
    pub fn azimuths_deg(&self) -> Vec<f64> {
        (0..self.views).map(|v| 360.0 * v as f64 / self.views as f64).collect()
    }

    pub fn renderer(&self) -> Result<Renderer> {
        let settings = RenderSettings {
            max_layers: 3,
            ..RenderSettings::default().with_sigma(self.sigma)
        };
        Renderer::new(Camera::synthetic(self.image_size), settings)
    }
}

fn unit_sphere(subdivisions: usize) -> Result<(Vec<Vec3>, Vec<[usize; 3]>, Vec<[f64; 2]>)> {
    let (unit, faces) = icosphere(subdivisions)?;
    let uv = unit.iter().map(|&p| spherical_uv(p)).collect();
    Ok((unit, faces, uv))
}

fn ellipsoid(rng: &mut impl Rng, subdivisions: usize) -> Result<TriMesh> {
    let (unit, faces, uv) = unit_sphere(subdivisions)?;
    let axes = [rng.random_range(0.85..1.15), rng.random_range(0.55..0.85), rng.random_range(0.55..0.85)];
    let bumps: Vec<(Vec3, f64, f64)> = (0..3)
        .map(|_| {
            let dir = [0, 1, 2].map(|_| rng.random_range(-2.5..2.5));
            (dir, rng.random_range(0.0..2.0 * PI), rng.random_range(0.03..0.08))
        })
        .collect();
    let verts = unit
        .iter()
        .map(|p| {
            let r = 1.0 + bumps.iter().map(|(d, ph, a)| a * (d[0] * p[0] + d[1] * p[1] + d[2] * p[2] + ph).sin()).sum::<f64>();
            [0, 1, 2].map(|k| 0.4 * axes[k] * r * p[k])
        })
        .collect();
    TriMesh::new(verts, faces, uv)
}

/// An icosphere pushed radially onto the box surface, so topology and UVs
/// stay those of the sphere.
fn boxed(subdivisions: usize, half: Vec3, center: Vec3) -> Result<TriMesh> {
    let (unit, faces, uv) = unit_sphere(subdivisions)?;
    let verts = unit
        .iter()
        .map(|p| {
            let m = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            [0, 1, 2].map(|k| center[k] + half[k] * p[k] / m)
        })
        .collect();
    TriMesh::new(verts, faces, uv)
}

fn merge(a: &TriMesh, b: &TriMesh) -> Result<TriMesh> {
    let n = a.num_vertices();
    let verts = a.vertices().iter().chain(b.vertices()).copied().collect();
    let uv = a.uv().iter().chain(b.uv()).copied().collect();
    let faces = a.faces().iter().copied().chain(b.faces().iter().map(|f| f.map(|i| i + n))).collect();
    TriMesh::new(verts, faces, uv)
}

fn two_boxes(rng: &mut impl Rng, subdivisions: usize) -> Result<TriMesh> {
    let a = boxed(
        subdivisions,
        [rng.random_range(0.25..0.35), rng.random_range(0.1..0.15), rng.random_range(0.15..0.22)],
        [-0.08, -0.06, 0.0],
    )?;
    let b = boxed(
        subdivisions,
        [rng.random_range(0.08..0.12), rng.random_range(0.18..0.25), rng.random_range(0.08..0.12)],
        [rng.random_range(0.1..0.2), 0.08, 0.0],
    )?;
    merge(&a, &b)
}

fn elongated_box(rng: &mut impl Rng, subdivisions: usize) -> Result<TriMesh> {
    let long = rng.random_range(0.45..0.55);
    let short = rng.random_range(0.1..0.14);
    boxed(subdivisions, [long, short, short], [0.0; 3])
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.1..0.9))
}

/// Stripes, bands, checks or a vertical gradient between two colors. All
/// patterns are periodic in u so the texture seam is invisible.
pub fn procedural_texture(rng: &mut impl Rng, size: usize) -> Array {
    let (a, b) = (random_color(rng), random_color(rng));
    let kind = rng.random_range(0..4);
    let fu = rng.random_range(2..6) as f64;
    let fv = rng.random_range(2..5) as f64;
    let mut data = Vec::with_capacity(size * size * 3);
    for row in 0..size {
        for col in 0..size {
            let [u, v] = texel_center_uv(size, size, col, row);
            let t = match kind {
                0 => 0.5 + 0.5 * (2.0 * PI * fu * u).sin(),
                1 => 0.5 + 0.5 * (PI * fv * v).sin(),
                2 => {
                    let s = (2.0 * PI * fu * u).sin() * (PI * fv * v).sin();
                    if s >= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => v,
            };
            data.extend((0..3).map(|c| a[c] * (1.0 - t) + b[c] * t));
        }
    }
    Array::new([size, size, 3], data).unwrap()
}

/// Renders `spec.instances` objects from `spec.views` azimuths each.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let renderer = spec.renderer()?;
    let background = solid_image(spec.image_size, spec.image_size, spec.background);
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut gt = GroundTruth::default();
    for i in 0..spec.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds.random());
        let kind = match spec.family {
            SceneFamily::Ellipsoids => ShapeKind::Ellipsoid,
            SceneFamily::TwoBoxes => ShapeKind::TwoBoxes,
            SceneFamily::EllipsoidAndBox if i % 2 == 0 => ShapeKind::Ellipsoid,
            SceneFamily::EllipsoidAndBox => ShapeKind::ElongatedBox,
        };
        let mesh = match kind {
            ShapeKind::Ellipsoid => ellipsoid(&mut rng, spec.subdivisions)?,
            ShapeKind::TwoBoxes => two_boxes(&mut rng, spec.subdivisions)?,
            ShapeKind::ElongatedBox => elongated_box(&mut rng, spec.subdivisions)?,
        };
        let texture = procedural_texture(&mut rng, spec.texture_size);
        let mesh_id = format!("obj{i:04}");
        for (v, az) in spec.azimuths_deg().into_iter().enumerate() {
            let pose = PoseRecord {
                azimuth_deg: az,
                elevation_deg: spec.elevation_deg,
                roll_deg: 0.0,
                scale: [1.0; 3],
                translation: [0.0, 0.0, spec.distance],
            };
            let posed = pose.to_pose().apply_mesh(&mesh);
            let (image, mask, _) = renderer.render_mesh(&posed, &texture, &background)?;
            let id = format!("{mesh_id}_v{v:02}");
            gt.push(
                GtRecord {
                    id: id.clone(),
                    mesh_id: mesh_id.clone(),
                    shape: kind,
                    pose,
                },
                mask.map(|m| if m >= 0.5 { 1.0 } else { 0.0 }),
            );
            ids.push(id);
            images.push(image);
        }
        gt.insert_mesh(mesh_id, GtMesh { mesh, texture });
    }
    Ok(Dataset::new(ImageSet::new(ids, images)?, Some(gt)))
}
