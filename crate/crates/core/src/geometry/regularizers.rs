//! Mesh smoothness terms, written with tape primitives so they differentiate
//! with respect to vertex positions.

use softmesh_tensor::{Array, Tape, Var};

use super::{TriMesh, Vec3};
use crate::error::{Error, Result};

/// Index lists for the regularizers; depends only on the faces, so it can
/// be built once and reused for every deformation of a mesh.
#[derive(Clone, Debug)]
pub struct MeshTopology {
    num_vertices: usize,
    /// Directed edges (both orientations of every undirected edge).
    src: Vec<usize>,
    dst: Vec<usize>,
    inv_degree: Vec<f64>,
    corners: [Vec<usize>; 3],
    /// Pairs of faces sharing an edge; boundary edges are left out.
    pair_a: Vec<usize>,
    pair_b: Vec<usize>,
}

impl MeshTopology {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        let edges = mesh.edges();
        let n = mesh.num_vertices();
        let mut src = Vec::with_capacity(2 * edges.len());
        let mut dst = Vec::with_capacity(2 * edges.len());
        let mut degree = vec![0usize; n];
        for &[a, b] in &edges.edges {
            src.extend_from_slice(&[a, b]);
            dst.extend_from_slice(&[b, a]);
            degree[a] += 1;
            degree[b] += 1;
        }
        if let Some(i) = degree.iter().position(|&d| d == 0) {
            return Err(Error::IsolatedVertex(i));
        }
        let mut pair_a = Vec::new();
        let mut pair_b = Vec::new();
        for (e, fs) in edges.faces.iter().enumerate() {
            match fs.as_slice() {
                [_] => {}
                [a, b] => {
                    pair_a.push(*a);
                    pair_b.push(*b);
                }
                _ => {
                    return Err(Error::Mesh(format!(
                        "edge {:?} is shared by {} faces",
                        edges.edges[e],
                        fs.len()
                    )))
                }
            }
        }
        let faces = mesh.faces();
        Ok(MeshTopology {
            num_vertices: n,
            src,
            dst,
            inv_degree: degree.iter().map(|&d| 1.0 / d as f64).collect(),
            corners: [0, 1, 2].map(|k| faces.iter().map(|f| f[k]).collect()),
            pair_a,
            pair_b,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }
}

fn uniform_laplacian(tape: &mut Tape, verts: Var, topo: &MeshTopology) -> Result<Var> {
    let nb = tape.gather(verts, &topo.dst)?;
    let sum = tape.scatter_add(nb, &topo.src, topo.num_vertices)?;
    let inv = tape.constant(Array::new([topo.num_vertices, 1], topo.inv_degree.clone())?);
    let mean = tape.mul(sum, inv)?;
    Ok(tape.sub(mean, verts)?)
}

/// Mean over vertices of |mean(neighbours) - v|^2. `verts` is N×3.
pub fn laplacian_loss_tape(tape: &mut Tape, verts: Var, topo: &MeshTopology) -> Result<Var> {
    let delta = uniform_laplacian(tape, verts, topo)?;
    let sq = tape.square(delta);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / topo.num_vertices as f64))
}

fn column(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    Ok(tape.slice(x, 1, k, 1)?)
}

/// Row-wise cross product of two M×3 nodes.
pub fn cross_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let a_: Vec<Var> = (0..3).map(|k| column(tape, a, k)).collect::<Result<_>>()?;
    let b_: Vec<Var> = (0..3).map(|k| column(tape, b, k)).collect::<Result<_>>()?;
    let mut cols = Vec::with_capacity(3);
    for k in 0..3 {
        let (i, j) = ((k + 1) % 3, (k + 2) % 3);
        let p = tape.mul(a_[i], b_[j])?;
        let q = tape.mul(a_[j], b_[i])?;
        cols.push(tape.sub(p, q)?);
    }
    Ok(tape.concat(&cols, 1)?)
}

/// Mean over interior edges of 1 - cos(angle between the adjacent face
/// normals). Boundary edges have no second face and are skipped.
pub fn normal_consistency_loss_tape(tape: &mut Tape, verts: Var, topo: &MeshTopology) -> Result<Var> {
    if topo.pair_a.is_empty() {
        return Err(Error::Mesh("no edge is shared by two faces".into()));
    }
    let a = tape.gather(verts, &topo.corners[0])?;
    let b = tape.gather(verts, &topo.corners[1])?;
    let c = tape.gather(verts, &topo.corners[2])?;
    let e1 = tape.sub(b, a)?;
    let e2 = tape.sub(c, a)?;
    let n = cross_rows(tape, e1, e2)?;
    let sq = tape.square(n);
    let len2 = tape.sum_axis(sq, 1)?;
    if let Some(f) = tape.value(len2).data().iter().position(|&l| !(l > 1e-30)) {
        return Err(Error::DegenerateFace(f));
    }
    let len = tape.sqrt(len2);
    let faces = topo.corners[0].len();
    let len = tape.reshape(len, &[faces, 1])?;
    let unit = tape.div(n, len)?;
    let na = tape.gather(unit, &topo.pair_a)?;
    let nb = tape.gather(unit, &topo.pair_b)?;
    let prod = tape.mul(na, nb)?;
    let cos = tape.sum_axis(prod, 1)?;
    let m = tape.mean(cos);
    Ok(tape.affine(m, -1.0, 1.0))
}

fn with_vertices_on_tape(
    mesh: &TriMesh,
    f: impl Fn(&mut Tape, Var, &MeshTopology) -> Result<Var>,
) -> Result<f64> {
    let topo = MeshTopology::new(mesh)?;
    let mut tape = Tape::new();
    let v = tape.constant(Array::new([mesh.num_vertices(), 3], mesh.vertex_data())?);
    let l = f(&mut tape, v, &topo)?;
    Ok(tape.value(l).item())
}

pub fn laplacian_loss(mesh: &TriMesh) -> Result<f64> {
    with_vertices_on_tape(mesh, laplacian_loss_tape)
}

pub fn normal_consistency_loss(mesh: &TriMesh) -> Result<f64> {
    with_vertices_on_tape(mesh, normal_consistency_loss_tape)
}

/// Per-vertex uniform Laplacian, mean(neighbours) - v.
pub fn laplacian_deltas(mesh: &TriMesh) -> Result<Vec<Vec3>> {
    let topo = MeshTopology::new(mesh)?;
    let mut acc = vec![[0.0; 3]; mesh.num_vertices()];
    for (&s, &d) in topo.src.iter().zip(&topo.dst) {
        for k in 0..3 {
            acc[s][k] += mesh.vertices()[d][k];
        }
    }
    Ok(acc
        .iter()
        .zip(mesh.vertices())
        .zip(&topo.inv_degree)
        .map(|((a, v), w)| [0, 1, 2].map(|k| a[k] * w - v[k]))
        .collect())
}
