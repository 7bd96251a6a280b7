use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softmesh_core::geometry::{make_ellipsoid, normalize, MeshTopology};
use softmesh_core::losses::*;
use softmesh_core::model::rotation::axis_angle;
use softmesh_core::model::{euler_matrix, geodesic_angle, Mat3};
use softmesh_tensor::{Array, Tape};

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array {
    Array::new([h, w, 3], (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
}

/// Direct 2-D blur-and-halve with repeated edges.
fn reduce_oracle(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let k = [1.0, 4.0, 6.0, 4.0, 1.0];
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; h2 * w2 * 3];
    for i in 0..h2 {
        for j in 0..w2 {
            for c in 0..3 {
                let mut s = 0.0;
                for (a, ka) in k.iter().enumerate() {
                    for (b, kb) in k.iter().enumerate() {
                        let y = (2 * i as isize + a as isize - 2).clamp(0, h as isize - 1) as usize;
                        let x = (2 * j as isize + b as isize - 2).clamp(0, w as isize - 1) as usize;
                        s += ka * kb / 256.0 * img[(y * w + x) * 3 + c];
                    }
                }
                out[(i * w2 + j) * 3 + c] = s;
            }
        }
    }
    (out, h2, w2)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn rec(a: &Array, b: &Array) -> (f64, f64, f64) {
    let mut t = Tape::new();
    let x = t.constant(a.clone());
    let y = t.constant(b.clone());
    let r = rec_loss(&mut t, x, y, &BinomialPyramid::default(), 10.0).unwrap();
    (t.value(r.total).item(), t.value(r.pix).item(), t.value(r.perc).item())
}

#[test]
fn reconstruction_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_image(&mut rng, 16, 16);
    assert_eq!(rec(&a, &a).0, 0.0);
    let (total, pix, perc) = rec(&Array::zeros([16, 16, 3]), &Array::ones([16, 16, 3]));
    assert!((pix - 1.0).abs() < 1e-15);
    assert!((perc - 1.0).abs() < 1e-12);
    assert!((total - 11.0).abs() < 1e-12);
}

#[test]
fn perceptual_weight_and_pyramid_match_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (16, 12);
    let a = random_image(&mut rng, h, w);
    let b = random_image(&mut rng, h, w);
    let (total, pix, perc) = rec(&a, &b);
    let (a1, h1, w1) = reduce_oracle(a.data(), h, w);
    let (b1, _, _) = reduce_oracle(b.data(), h, w);
    let (a2, _, _) = reduce_oracle(&a1, h1, w1);
    let (b2, _, _) = reduce_oracle(&b1, h1, w1);
    let pix_oracle = mse(a.data(), b.data());
    let perc_oracle = (pix_oracle + mse(&a1, &b1) + mse(&a2, &b2)) / 3.0;
    assert!((pix - pix_oracle).abs() < 1e-14);
    assert!((perc - perc_oracle).abs() < 1e-12);
    assert!((total - (pix_oracle + 10.0 * perc_oracle)).abs() < 1e-11);
}

#[test]
fn reconstruction_rejects_shape_mismatch() {
    let mut t = Tape::new();
    let x = t.constant(Array::zeros([4, 4, 3]));
    let y = t.constant(Array::zeros([4, 8, 3]));
    assert!(rec_loss(&mut t, x, y, &BinomialPyramid::default(), 10.0).is_err());
}

#[test]
fn l3d_terms() {
    let sphere = make_ellipsoid(2, [1.0, 1.0, 1.0], 0.5).unwrap();
    let topo = MeshTopology::new(&sphere).unwrap();
    let mut t = Tape::new();
    let v = t.constant(Array::new([sphere.num_vertices(), 3], sphere.vertex_data()).unwrap());
    let reg = mesh_regularization(&mut t, v, &topo).unwrap();
    let zero = t.scalar(0.0);
    let nbr = t.scalar(0.7);
    let w = LossWeights::default();
    let total = l3d(&mut t, zero, None, reg, 2, &w).unwrap();
    let reg_v = t.value(reg).item();
    assert!(reg_v > 0.0);
    assert!((t.value(total).item() - 0.01 * reg_v).abs() < 1e-15);
    let s1 = l3d(&mut t, zero, Some(nbr), reg, 1, &w).unwrap();
    assert_eq!(t.value(s1).item(), t.value(total).item());
    let s2 = l3d(&mut t, zero, Some(nbr), reg, 2, &w).unwrap();
    assert!((t.value(s2).item() - t.value(total).item() - 0.7).abs() < 1e-15);
    let doubled = LossWeights { reg: 0.02, ..w };
    let d = l3d(&mut t, zero, None, reg, 2, &doubled).unwrap();
    assert!((t.value(d).item() - 2.0 * t.value(total).item()).abs() < 1e-15);
    assert!(LossWeights { uni: -1.0, ..w }.validate().is_err());
}

fn uni(rows: &[Vec<f64>]) -> f64 {
    let k = rows[0].len();
    let mut t = Tape::new();
    let p = t.constant(Array::new([rows.len(), k], rows.concat()).unwrap());
    let l = uniformity_loss(&mut t, p).unwrap();
    t.value(l).item()
}

#[test]
fn uniformity_examples() {
    assert!(uni(&vec![vec![1.0 / 6.0; 6]; 4]).abs() < 1e-15);
    let one_hot = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    assert!((uni(&[one_hot.clone(), one_hot]) - 5.0 / 3.0).abs() < 1e-15);
}

#[test]
fn viewpoint_bins() {
    assert_eq!(viewpoint_bin(50.0), Some(0));
    assert_eq!(viewpoint_bin(19.99), None);
    assert_eq!(viewpoint_bin(20.0), Some(0));
    assert_eq!(viewpoint_bin(52.0), Some(1));
    assert_eq!(viewpoint_bin(147.9), Some(3));
    assert_eq!(viewpoint_bin(180.0), Some(4));
}

#[test]
fn geodesic_angle_of_axis_rotations() {
    let id = euler_matrix(0.0, 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let axis = normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let r = axis_angle(axis, theta);
        assert!((geodesic_angle(&id, &r) - theta).abs() < 1e-6);
    }
    let r = axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
    assert!((geodesic_angle(&id, &r).to_degrees() - 90.0).abs() < 1e-9);
}

fn entry(rotation: Mat3, z_sh: Vec<f64>, z_tx: Vec<f64>) -> BankEntry {
    BankEntry {
        image: Array::zeros([2, 2, 3]),
        row: None,
        z_sh,
        z_tx,
        z_bg: None,
        rotation,
    }
}

#[test]
fn bank_is_fifo() {
    let mut bank = MemoryBank::new(3);
    for i in 0..5 {
        bank.push(entry(euler_matrix(0.0, 0.0, 0.0), vec![i as f64], vec![]));
    }
    assert_eq!(bank.len(), 3);
    let firsts: Vec<f64> = bank.iter().map(|e| e.z_sh[0]).collect();
    assert_eq!(firsts, vec![2.0, 3.0, 4.0]);
}

#[test]
fn near_views_are_never_neighbors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = euler_matrix(0.3, 0.2, 0.0);
    assert!(matches!(
        select_neighbor(&q, &[0.0], &MemoryBank::new(4), Space::Shape, &mut rng),
        Err(softmesh_core::Error::EmptyBank)
    ));
    let mut bank = MemoryBank::new(8);
    // the same image seen 10 degrees away: identical code, excluded range
    bank.push(entry(euler_matrix(0.3 + 10f64.to_radians(), 0.2, 0.0), vec![0.0], vec![0.0]));
    assert_eq!(select_neighbor(&q, &[0.0], &bank, Space::Shape, &mut rng).unwrap(), None);
    bank.push(entry(euler_matrix(0.3 + 1.5, 0.2, 0.0), vec![5.0], vec![5.0]));
    for _ in 0..20 {
        assert_eq!(select_neighbor(&q, &[0.0], &bank, Space::Texture, &mut rng).unwrap(), Some(1));
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    euler_matrix(
        rng.random_range(-3.2..3.2),
        rng.random_range(-1.5..1.5),
        rng.random_range(-3.2..3.2),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniformity_is_bounded_and_permutation_invariant(
        raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 5), 1..8),
        shift in 0usize..5,
    ) {
        let rows: Vec<Vec<f64>> = raw.iter().map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|x| x / s).collect()
        }).collect();
        let v = uni(&rows);
        prop_assert!(v >= 0.0 && v <= 2.0 * 4.0 / 5.0 + 1e-12);
        let rotated: Vec<Vec<f64>> = rows.iter().map(|r| {
            let mut r = r.clone();
            r.rotate_left(shift);
            r
        }).collect();
        prop_assert!((uni(&rotated) - v).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_is_nonnegative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, 8, 8);
        let b = random_image(&mut rng, 8, 8);
        let (total, pix, perc) = rec(&a, &b);
        prop_assert!(total > 0.0 && pix > 0.0 && perc > 0.0);
    }
}

/// Exhaustive check over 1000 random banks: the returned entry is in a
/// non-empty bin and is that bin's nearest code.
#[test]
fn select_neighbor_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut chosen_bins = [0usize; 5];
    for trial in 0..1000 {
        let n = rng.random_range(1..=256);
        let mut bank = MemoryBank::new(256);
        for _ in 0..n {
            let r = random_rotation(&mut rng);
            let sh = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tx = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            bank.push(entry(r, sh, tx));
        }
        let q = random_rotation(&mut rng);
        let space = if trial % 2 == 0 { Space::Texture } else { Space::Shape };
        let code: Vec<f64> = (0..if space == Space::Texture { 6 } else { 4 }).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = select_neighbor(&q, &code, &bank, space, &mut rng).unwrap();

        let bin_of = |i: usize| viewpoint_bin(geodesic_angle(&q, &bank.get(i).rotation).to_degrees());
        let dist = |i: usize| {
            let e = bank.get(i);
            let c = if space == Space::Texture { &e.z_tx } else { &e.z_sh };
            c.iter().zip(&code).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        match got {
            None => assert!((0..n).all(|i| bin_of(i).is_none())),
            Some(g) => {
                let bin = bin_of(g).expect("selected entry must be binned");
                chosen_bins[bin] += 1;
                let mut best = None::<(usize, f64)>;
                for i in (0..n).filter(|&i| bin_of(i) == Some(bin)) {
                    let d = dist(i);
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
                assert_eq!(Some(g), best.map(|b| b.0), "trial {trial}");
            }
        }
    }
    assert!(chosen_bins.iter().all(|&c| c > 50), "{chosen_bins:?}");
}

#[test]
fn neighbor_gradients_follow_the_swaps() {
    use softmesh_core::camera::Camera;
    use softmesh_core::model::{Conditioning, LatentMode, ModelConfig, SceneModel, Source};
    use softmesh_core::rasterizer::{RenderSettings, Renderer};

    let cfg = ModelConfig {
        mode: LatentMode::AutoDecoder,
        num_images: 3,
        image_size: 16,
        learn_background: true,
        ..ModelConfig::desk()
    };
    let mut model = SceneModel::new(cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for name in ["deform.2.weight", "latent.pose"] {
        let id = model.store.id(name).unwrap();
        for v in model.store.get_mut(id).value.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let renderer = Renderer::new(Camera::synthetic(16), RenderSettings::default().with_sigma(1e-3)).unwrap();
    let cond = Conditioning::full(4);
    let decoded = model.decode(Source::Rows(&[0, 1, 2]), cond).unwrap();
    let mut bank = MemoryBank::new(8);
    for row in [1, 2] {
        // bank rotations far from the query so both entries are binned
        bank.push(BankEntry {
            image: random_image(&mut rng, 16, 16),
            row: Some(row),
            z_sh: vec![0.0; 64],
            z_tx: vec![0.0; 512],
            z_bg: None,
            rotation: euler_matrix(2.0 + row as f64 * 0.3, 0.0, 0.0),
        });
    }
    let mut t = Tape::new();
    let bound = model.store.bind_all(&mut t);
    let lat = model.encode(&mut t, &bound, Source::Rows(&[0]), cond).unwrap();
    let query = NeighborQuery {
        latents: &lat,
        item: 0,
        candidate: decoded[0].selected,
        rotation: decoded[0].pose().rotation(),
    };
    let out = neighbor_loss(
        &mut t,
        &bound,
        &model,
        &renderer,
        &query,
        &bank,
        cond,
        false,
        &BinomialPyramid::default(),
        10.0,
        &mut rng,
    )
    .unwrap();
    assert_eq!(out.skipped, 0);
    let g = t.backward(out.loss.unwrap()).unwrap();
    let row0 = |name: &str| {
        let id = model.store.id(name).unwrap();
        let a = g.get(bound.var(id));
        let w = a.shape()[1];
        a.data()[..w].to_vec()
    };
    assert!(row0("latent.texture").iter().any(|&x| x != 0.0));
    assert!(row0("latent.shape")[..64].iter().any(|&x| x != 0.0));
    assert!(row0("latent.background").iter().all(|&x| x == 0.0));
}
