use esbm_wasm_demo::{DemoCore, WINDOW};

#[test]
fn grid_shape_and_wells() {
    let d = DemoCore::new(0).unwrap();
    let (nx, ny) = (37, 25);
    let g = d.energy_grid(nx, ny).unwrap();
    assert_eq!(g.len(), nx * ny);
    // the wells at (+-1, 0) are the grid minima; the barrier sits between
    let at = |x: f64, y: f64| {
        let i = ((x - WINDOW.0) / (WINDOW.1 - WINDOW.0) * (nx - 1) as f64).round() as usize;
        let j = ((y - WINDOW.2) / (WINDOW.3 - WINDOW.2) * (ny - 1) as f64).round() as usize;
        g[j * nx + i]
    };
    let min = g.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!((at(-1.0, 0.0) - min).abs() < 1e-9 && (at(1.0, 0.0) - min).abs() < 1e-9);
    assert!(at(0.0, 0.0) > at(1.0, 0.0) + 0.5);
}

#[test]
fn paths_have_expected_layout_and_are_seeded() {
    let d = DemoCore::new(0).unwrap();
    let p = d.paths(false, 4, 9).unwrap();
    assert_eq!(p.points.len(), 4 * (d.steps() + 1) * 2);
    assert_eq!(&p.points[..2], &[-1.0, 0.0]);
    assert_eq!(p, d.paths(false, 4, 9).unwrap());
    assert_ne!(p, d.paths(false, 4, 10).unwrap());
}

#[test]
fn base_dynamics_rarely_cross() {
    let d = DemoCore::new(0).unwrap();
    let p = d.paths(false, 32, 1).unwrap();
    assert!(p.hits <= 2, "{} of 32 crossed", p.hits);
}

#[test]
fn training_moves_the_network() {
    let mut d = DemoCore::new(3).unwrap();
    let before = d.paths(true, 8, 5).unwrap();
    let losses = d.train(2).unwrap().to_vec();
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert_eq!(d.rollouts_done(), 2);
    assert_ne!(before, d.paths(true, 8, 5).unwrap());
}
