//! Rasterizer checks against independent oracles: brute-force edge
//! sampling, a hard z-buffer, finite differences and symmetry.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softmesh_core::camera::Camera;
use softmesh_core::geometry::{make_ellipsoid, TriMesh};
use softmesh_core::rasterizer::{
    composite_layered, layered_weights, signed_distance, solid_image, Layer, LayerStack, RenderSettings, Renderer,
};
use softmesh_tensor::{check_gradients, Array, GradCheckOptions, Tape};

fn brute_edge_distance(p: [f64; 2], tri: [[f64; 2]; 3]) -> f64 {
    let mut best = f64::MAX;
    for k in 0..3 {
        let (a, b) = (tri[k], tri[(k + 1) % 3]);
        for s in 0..=20_000 {
            let t = s as f64 / 20_000.0;
            let q = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            best = best.min(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
        }
    }
    best
}

#[test]
fn outside_distance_matches_edge_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tri = [[-0.4, -0.3], [0.5, -0.2], [0.1, 0.6]];
    let mut checked = 0;
    while checked < 30 {
        let p = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let nu = signed_distance(p, tri).unwrap();
        if nu >= 0.0 {
            continue;
        }
        let d = brute_edge_distance(p, tri);
        // sampling resolution bounds the oracle's own error
        assert!((-nu - d).abs() < 1e-4, "{p:?}: {nu} vs {d}");
        checked += 1;
    }
}

fn two_color_texture() -> Array {
    // left half red, right half blue, 8 texels wide
    let data = (0..2 * 8)
        .flat_map(|i| if i % 8 < 4 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] })
        .collect();
    Array::new([2, 8, 3], data).unwrap()
}

fn z_buffer_oracle(cam: &Camera, mesh: &TriMesh, face_color: &[[f64; 3]], bg: [f64; 3]) -> Vec<[f64; 3]> {
    let mut out = vec![bg; cam.width * cam.height];
    let mut depth = vec![f64::INFINITY; cam.width * cam.height];
    for (fi, f) in mesh.faces().iter().enumerate() {
        let p = f.map(|i| cam.project_point(mesh.vertices()[i]).unwrap());
        for row in 0..cam.height {
            for col in 0..cam.width {
                let c = cam.pixel_center(col, row);
                let e = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
                let w = [e(p[1].0, p[2].0), e(p[2].0, p[0].0), e(p[0].0, p[1].0)];
                let inside = w.iter().all(|&x| x >= 0.0) || w.iter().all(|&x| x <= 0.0);
                if inside {
                    let s: f64 = w.iter().sum();
                    let z = 1.0 / (0..3).map(|k| w[k] / s / p[k].1).sum::<f64>();
                    let i = row * cam.width + col;
                    if z < depth[i] {
                        depth[i] = z;
                        out[i] = face_color[fi];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn opaque_scene_matches_hard_z_buffer() {
    let cam = Camera::synthetic(32);
    // a red triangle in front of a larger blue one, overlapping on screen
    let mesh = TriMesh::new(
        vec![
            [-0.3, -0.3, 2.0],
            [0.3, -0.25, 2.0],
            [0.0, 0.35, 2.0],
            [-0.6, -0.1, 3.0],
            [0.7, -0.5, 3.2],
            [0.4, 0.6, 3.1],
        ],
        vec![[0, 1, 2], [3, 4, 5]],
        vec![[0.1, 0.2], [0.2, 0.2], [0.3, 0.8], [0.6, 0.2], [0.7, 0.5], [0.8, 0.8]],
    )
    .unwrap();
    let r = Renderer::new(cam, RenderSettings::default().with_sigma(1e-9)).unwrap();
    let bg = [0.2, 0.9, 0.3];
    let (img, _, _) = r.render_mesh(&mesh, &two_color_texture(), &solid_image(32, 32, bg)).unwrap();
    let want = z_buffer_oracle(&cam, &mesh, &[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], bg);
    let mut differing = 0;
    for (p, w) in want.iter().enumerate() {
        for c in 0..3 {
            if (img.data()[3 * p + c] - w[c]).abs() > 1.0 / 255.0 {
                differing += 1;
            }
        }
    }
    assert_eq!(differing, 0);
}

fn iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut i, mut u) = (0, 0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        i += (x && y) as usize;
        u += (x || y) as usize;
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn posed_ellipsoid() -> TriMesh {
    make_ellipsoid(2, [1.0, 0.7, 0.7], 0.4)
        .unwrap()
        .map_vertices(|v| [v[0], v[1], v[2] + 2.732])
}

#[test]
fn mask_converges_to_silhouette_as_sigma_shrinks() {
    let cam = Camera::synthetic(32);
    let mesh = posed_ellipsoid();
    let tex = solid_image(4, 4, [0.5; 3]);
    let bg = solid_image(32, 32, [0.0; 3]);
    let hard: Vec<f64> = z_buffer_oracle(&cam, &mesh, &vec![[1.0; 3]; mesh.num_faces()], [0.0; 3])
        .iter()
        .map(|c| c[0])
        .collect();
    let mut last = 0.0;
    for sigma in [1e-2, 1e-3, 1e-4] {
        let r = Renderer::new(cam, RenderSettings::default().with_sigma(sigma)).unwrap();
        let (_, mask, _) = r.render_mesh(&mesh, &tex, &bg).unwrap();
        assert!(mask.data().iter().all(|&m| (0.0..=1.0).contains(&m)));
        let v = iou(mask.data(), &hard);
        assert!(v >= last, "IoU fell from {last} to {v} at sigma {sigma}");
        last = v;
    }
    assert!(last > 0.95, "{last}");
}

#[test]
fn white_on_white_and_symmetry() {
    let cam = Camera::synthetic(31);
    let mesh = posed_ellipsoid();
    let r = Renderer::new(cam, RenderSettings::default()).unwrap();
    let (img, mask, diag) = r
        .render_mesh(&mesh, &solid_image(8, 8, [1.0; 3]), &solid_image(31, 31, [1.0; 3]))
        .unwrap();
    assert!(img.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    assert!(mask.data().iter().filter(|&&m| m > 0.5).count() > 50);
    assert_eq!(diag.degenerate_faces, 0);
    let w = cam.width;
    for row in 0..cam.height {
        for col in 0..w {
            let a = mask.data()[row * w + col] > 0.5;
            let mirrored = (col.saturating_sub(1)..=(col + 1).min(w - 1))
                .any(|c| (mask.data()[row * w + (w - 1 - c)] > 0.5) == a);
            assert!(mirrored, "row {row} col {col}");
        }
    }
}

#[test]
fn render_is_deterministic() {
    let cam = Camera::synthetic(24);
    let r = Renderer::new(cam, RenderSettings::default()).unwrap();
    let tex = Array::new([4, 4, 3], (0..48).map(|i| (i as f64 * 0.1).fract()).collect()).unwrap();
    let bg = solid_image(24, 24, [0.1, 0.2, 0.3]);
    let a = r.render_mesh(&posed_ellipsoid(), &tex, &bg).unwrap();
    let b = r.render_mesh(&posed_ellipsoid(), &tex, &bg).unwrap();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn render_gradients_match_finite_differences() {
    let cam = Camera::synthetic(16);
    let mut settings = RenderSettings::default().with_sigma(1e-3);
    // a wide cutoff keeps the truncation jump (exp(-36)) far below the
    // finite-difference resolution
    settings.radius_factor = 6.0;
    let r = Renderer::new(cam, settings).unwrap();
    // a generic pose: mirror-symmetric placements create exact depth ties
    // between faces, where layer order (and so the image) jumps
    let mesh = make_ellipsoid(1, [1.0, 0.7, 0.7], 0.4).unwrap().map_vertices(|v| {
        let (a, b) = (0.7f64, 0.4f64);
        let x = a.cos() * v[0] + a.sin() * v[2];
        let z = -a.sin() * v[0] + a.cos() * v[2];
        let y = b.cos() * v[1] - b.sin() * z;
        let z = b.sin() * v[1] + b.cos() * z;
        [x + 0.03, y + 0.05, z + 2.732]
    });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tex = Array::new([6, 8, 3], (0..144).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let bg = Array::new([16, 16, 3], (0..768).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let target = Array::new([16, 16, 4], (0..1024).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let verts = Array::new([mesh.num_vertices(), 3], mesh.vertex_data()).unwrap();
    let faces = mesh.faces().to_vec();
    let uv = mesh.uv().to_vec();
    let report = check_gradients(
        |t: &mut Tape, v| {
            let out = r.render(t, v[0], &faces, &uv, v[1], v[2])?;
            let tg = t.constant(target.clone());
            let d = t.sub(out.rgba, tg)?;
            let sq = t.square(d);
            Ok::<_, softmesh_core::Error>(t.mean(sq))
        },
        &[verts, tex, bg],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-2), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layered_weights_sum_to_one(occ in proptest::collection::vec(0.0f64..=1.0, 0..8)) {
        let w = layered_weights(&occ);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stack_composite_is_a_convex_blend(
        occ in proptest::collection::vec(0.0f64..=1.0, 1..5),
        shade in 0.0f64..1.0,
    ) {
        let layers: Vec<Layer> = occ.iter().enumerate().map(|(i, &o)| Layer {
            face: i, occupancy: o, color: [shade, 1.0 - shade, 0.5], depth: i as f64 + 1.0,
        }).collect();
        let stack = LayerStack { width: 1, height: 1, pixels: vec![layers], background: vec![[shade, 1.0 - shade, 0.5]] };
        let (c, m) = composite_layered(&stack);
        prop_assert!((c[0][0] - shade).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m[0]));
    }
}
