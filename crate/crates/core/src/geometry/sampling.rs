use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{TriMesh, Vec3};
use crate::error::{invalid, Error, Result};

/// `n` points uniformly distributed over the surface area.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    Ok(sample_surface_with_faces(mesh, n, seed)?.into_iter().map(|(p, _)| p).collect())
}

/// Like [`sample_surface`], also reporting the face each point lies on.
pub fn sample_surface_with_faces(mesh: &TriMesh, n: usize, seed: u64) -> Result<Vec<(Vec3, usize)>> {
    if n == 0 {
        return Err(invalid("sample_surface needs n >= 1"));
    }
    let areas: Vec<f64> = (0..mesh.num_faces()).map(|f| mesh.face_area(f)).collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Mesh("total surface area is zero".into()));
    }
    let pick = WeightedIndex::new(&areas).map_err(|e| Error::Mesh(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let f = pick.sample(&mut rng);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let w = [1.0 - s, s * (1.0 - r2), s * r2];
        let [a, b, c] = mesh.faces()[f].map(|i| mesh.vertices()[i]);
        out.push(([0, 1, 2].map(|k| w[0] * a[k] + w[1] * b[k] + w[2] * c[k]), f));
    }
    Ok(out)
}
