//! Seeded synthetic point clouds standing in for measured data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Two interleaved half circles of radius `radius` in the plane, row-major
/// `points x 2`, with Gaussian jitter of standard deviation `noise * radius`.
pub fn two_moons(points: usize, radius: f64, noise: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let mut out = Vec::with_capacity(points * 2);
    for i in 0..points {
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (x, y) = if i % 2 == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        out.push(radius * (x + jitter.sample(&mut rng)));
        out.push(radius * (y + jitter.sample(&mut rng)));
    }
    out
}

/// A source blob, a target blob and a curved tube joining them in `dim`
/// dimensions. Returns `(source, target, whole cloud)`, all row-major.
/// The blobs sit at `-/+ separation/2` along the first axis; the tube bows
/// out along the second axis.
#[derive(Debug, Clone)]
pub struct BridgeCloud {
    pub dim: usize,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub all: Vec<f64>,
}

pub fn bridge_cloud(dim: usize, per_blob: usize, per_arc: usize, separation: f64, spread: f64, seed: u64) -> BridgeCloud {
    assert!(dim >= 2, "bridge cloud needs at least two dimensions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).expect("finite spread");
    let half = separation / 2.0;
    let blob = |center: f64, rng: &mut ChaCha8Rng| {
        let mut v = Vec::with_capacity(per_blob * dim);
        for _ in 0..per_blob {
            for j in 0..dim {
                let c = if j == 0 { center } else { 0.0 };
                v.push(c + noise.sample(rng));
            }
        }
        v
    };
    let source = blob(-half, &mut rng);
    let target = blob(half, &mut rng);
    let mut arc = Vec::with_capacity(per_arc * dim);
    for _ in 0..per_arc {
        let t = std::f64::consts::PI * rng.random::<f64>();
        for j in 0..dim {
            let c = match j {
                0 => -half * t.cos(),
                1 => half * t.sin(),
                _ => 0.0,
            };
            arc.push(c + noise.sample(&mut rng));
        }
    }
    let mut all = source.clone();
    all.extend_from_slice(&target);
    all.extend_from_slice(&arc);
    BridgeCloud { dim, source, target, all }
}
