//! Triangle meshes: the reference ellipsoid, connectivity, regularizers,
//! surface sampling and OBJ files.

mod obj;
mod regularizers;
mod sampling;

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub use obj::{read_obj, write_obj};
pub use regularizers::{
    cross_rows, laplacian_deltas, laplacian_loss, laplacian_loss_tape, normal_consistency_loss,
    normal_consistency_loss_tape, MeshTopology,
};
pub use sampling::{sample_surface, sample_surface_with_faces};

pub type Vec3 = [f64; 3];

/// A triangle mesh whose UV coordinates are fixed at construction.
///
/// Vertex positions can be replaced through [`TriMesh::with_vertices`];
/// faces and UVs cannot change afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    uv: Vec<[f64; 2]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, uv: Vec<[f64; 2]>) -> Result<Self> {
        if uv.len() != vertices.len() {
            return Err(Error::Mesh(format!(
                "{} uv coordinates for {} vertices",
                uv.len(),
                vertices.len()
            )));
        }
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&j| j >= vertices.len()) {
                return Err(Error::Mesh(format!(
                    "face {i} indexes vertex {} of {}",
                    f.iter().max().unwrap(),
                    vertices.len()
                )));
            }
        }
        Ok(TriMesh { vertices, faces, uv })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn uv(&self) -> &[[f64; 2]] {
        &self.uv
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Same connectivity and UVs, new positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Mesh(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(TriMesh {
            vertices,
            faces: self.faces.clone(),
            uv: self.uv.clone(),
        })
    }

    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        TriMesh {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            faces: self.faces.clone(),
            uv: self.uv.clone(),
        }
    }

    /// Flat N×3 row-major positions, the layout used on the tape.
    pub fn vertex_data(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    /// Unnormalized face normal (twice the area times the unit normal).
    pub fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        cross(sub(b, a), sub(c, a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * norm(self.face_cross(f))
    }

    pub fn face_normals(&self) -> Vec<Vec3> {
        (0..self.faces.len())
            .map(|f| {
                let n = self.face_cross(f);
                let l = norm(n);
                if l > 0.0 {
                    scale(n, 1.0 / l)
                } else {
                    [0.0; 3]
                }
            })
            .collect()
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut out = vec![[0.0; 3]; self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let n = self.face_cross(fi);
            for &i in f {
                out[i] = add(out[i], n);
            }
        }
        for n in &mut out {
            let l = norm(*n);
            if l > 0.0 {
                *n = scale(*n, 1.0 / l);
            }
        }
        out
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn edges(&self) -> EdgeList {
        EdgeList::build(self)
    }

    /// Every edge is shared by exactly two faces, in opposite directions.
    pub fn is_closed_manifold(&self) -> bool {
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }
}

/// Unique undirected edges with their adjacent faces.
#[derive(Clone, Debug)]
pub struct EdgeList {
    pub edges: Vec<[usize; 2]>,
    /// Faces touching each edge, in order of first appearance.
    pub faces: Vec<Vec<usize>>,
}

impl EdgeList {
    pub fn build(mesh: &TriMesh) -> Self {
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut faces: Vec<Vec<usize>> = Vec::new();
        for (fi, f) in mesh.faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let e = *index.entry(key).or_insert_with(|| {
                    edges.push([key.0, key.1]);
                    faces.push(Vec::new());
                    edges.len() - 1
                });
                faces[e].push(fi);
            }
        }
        EdgeList { edges, faces }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// `(edge, face_a, face_b)` for every edge with exactly two faces.
    pub fn interior_pairs(&self) -> Result<Vec<(usize, usize, usize)>> {
        self.faces
            .iter()
            .enumerate()
            .map(|(e, fs)| match fs.as_slice() {
                [a, b] => Ok((e, *a, *b)),
                _ => Err(Error::Mesh(format!(
                    "edge {:?} has {} adjacent faces, expected 2",
                    self.edges[e],
                    fs.len()
                ))),
            })
            .collect()
    }
}

/// Unit icosphere after `subdivisions` rounds of midpoint subdivision.
/// Faces are counter-clockwise seen from outside.
pub fn icosphere(subdivisions: usize) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    if subdivisions > 5 {
        return Err(crate::error::invalid(format!(
            "subdivisions must be in [0, 5], got {subdivisions}"
        )));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|&v| normalize(v))
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(normalize(scale(add(verts[a], verts[b]), 0.5)));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    Ok((verts, faces))
}

/// Spherical UV of a unit-sphere point: u from the azimuth about +y
/// (0 on +z, increasing towards +x), v from the elevation.
pub fn spherical_uv(p: Vec3) -> [f64; 2] {
    let mut az = p[0].atan2(p[2]);
    if az < 0.0 {
        az += 2.0 * PI;
    }
    let mut u = az / (2.0 * PI);
    if u >= 1.0 {
        u = 0.0;
    }
    let el = p[1].clamp(-1.0, 1.0).asin();
    [u, (el + PI / 2.0) / PI]
}

/// The reference ellipsoid: a unit icosphere scaled per axis, then globally.
pub fn make_ellipsoid(subdivisions: usize, axis_scale: Vec3, global_scale: f64) -> Result<TriMesh> {
    if axis_scale.iter().any(|&s| !(s > 0.0)) || !(global_scale > 0.0) {
        return Err(crate::error::invalid(format!(
            "ellipsoid scales must be positive, got {axis_scale:?} x {global_scale}"
        )));
    }
    let (unit, faces) = icosphere(subdivisions)?;
    let uv = unit.iter().map(|&p| spherical_uv(p)).collect();
    let vertices = unit
        .iter()
        .map(|p| [0, 1, 2].map(|k| p[k] * axis_scale[k] * global_scale))
        .collect();
    TriMesh::new(vertices, faces, uv)
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subdivision_counts() {
        for n in 0..=4 {
            let m = make_ellipsoid(n, [1.0; 3], 1.0).unwrap();
            assert_eq!(m.num_vertices(), 10 * 4usize.pow(n as u32) + 2);
            assert_eq!(m.num_faces(), 20 * 4usize.pow(n as u32));
            assert!(m.is_closed_manifold(), "level {n}");
        }
        let m = make_ellipsoid(2, [1.0; 3], 1.0).unwrap();
        assert_eq!((m.num_vertices(), m.num_faces()), (162, 320));
        assert!(make_ellipsoid(6, [1.0; 3], 1.0).is_err());
        assert!(make_ellipsoid(1, [1.0, 0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn faces_point_outwards() {
        let m = make_ellipsoid(2, [1.0, 0.7, 0.7], 0.4).unwrap();
        for f in 0..m.num_faces() {
            let c = m.faces()[f]
                .iter()
                .fold([0.0; 3], |acc, &i| add(acc, m.vertices()[i]));
            assert!(dot(m.face_cross(f), c) > 0.0, "face {f} points inwards");
        }
    }

    #[test]
    fn axis_scaling_and_unit_radius() {
        let m = make_ellipsoid(1, [1.0, 0.7, 0.7], 1.0).unwrap();
        let (unit, _) = icosphere(1).unwrap();
        for (p, q) in unit.iter().zip(m.vertices()) {
            assert!((q[0] - p[0]).abs() < 1e-15);
            assert!((q[1] - 0.7 * p[1]).abs() < 1e-15);
            assert!((q[2] - 0.7 * p[2]).abs() < 1e-15);
        }
        // the unit-sphere point (0,1,0) itself
        let top = [0.0, 1.0, 0.0];
        assert_eq!([0, 1, 2].map(|k| top[k] * [1.0, 0.7, 0.7][k]), [0.0, 0.7, 0.0]);
        let s = make_ellipsoid(3, [1.0; 3], 1.0).unwrap();
        assert!(s.vertices().iter().all(|&v| (norm(v) - 1.0).abs() < 1e-6));
    }

    #[test]
    fn uv_convention() {
        let [u, v] = spherical_uv([0.0, 0.0, 1.0]);
        assert_eq!((u, v), (0.0, 0.5));
        let [u, _] = spherical_uv([1.0, 0.0, 0.0]);
        assert!((u - 0.25).abs() < 1e-15);
        let [u, _] = spherical_uv([0.0, 0.0, -1.0]);
        assert!((u - 0.5).abs() < 1e-15);
        assert_eq!(spherical_uv([0.0, 1.0, 0.0])[1], 1.0);
        assert_eq!(spherical_uv([0.0, -1.0, 0.0])[1], 0.0);
        let m = make_ellipsoid(2, [1.0, 0.7, 0.7], 0.4).unwrap();
        assert!(m.uv().iter().all(|t| (0.0..1.0).contains(&t[0]) && (0.0..=1.0).contains(&t[1])));
    }

    #[test]
    fn uv_survives_deformation() {
        let m = make_ellipsoid(1, [1.0; 3], 1.0).unwrap();
        let d = m.map_vertices(|v| [v[0] * 3.0, v[1] + 1.0, -v[2]]);
        assert_eq!(d.uv(), m.uv());
        assert_eq!(d.faces(), m.faces());
        assert!(m.with_vertices(vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn edges_have_two_faces() {
        let m = make_ellipsoid(2, [1.0; 3], 1.0).unwrap();
        let e = m.edges();
        assert_eq!(e.len(), 480);
        assert!(e.faces.iter().all(|f| f.len() == 2));
        assert_eq!(e.interior_pairs().unwrap().len(), 480);
    }
}
