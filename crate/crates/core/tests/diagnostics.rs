use softmesh_core::diagnostics::*;

#[test]
fn every_gradient_suite_passes() {
    let results = all_suites().unwrap();
    for r in &results {
        eprintln!("{:<10} {:<36} {:.2e} (tol {:.0e}) {:.2}s", r.group, r.name, r.max_rel_err, r.tolerance, r.seconds);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(results.iter().any(|r| r.group == "render"));
}

#[test]
fn depth_softmax_starves_vertex_gradients() {
    let r = sr_pathology().unwrap();
    eprintln!("{r:?} ratio {}", r.ratio());
    assert!((r.depth - 99.505).abs() < 1e-9);
    assert!(r.composite_error < 1e-2);
    assert!(r.render_error < 1e-2);
    assert!(r.min_rendered_occupancy >= PATHOLOGY_OCCUPANCY / 4.0);
    assert!(r.layered_grad > 1e-3);
    assert!(r.ratio() >= 1e6);
}
