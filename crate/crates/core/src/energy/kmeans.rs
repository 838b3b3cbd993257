use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LLOYD_ITERATIONS: usize = 50;
pub const MAX_RESEEDS: usize = 5;

/// Cluster centroids (row-major `k x dim`) and per-point assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    pub k: usize,
    pub dim: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means with k-means++ initialization. An empty cluster restarts
/// the whole run from a fresh seed, at most [`MAX_RESEEDS`] times.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64) -> Result<Clustering> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Invalid(format!("{} values do not form {dim}-dimensional points", points.len())));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::Invalid(format!("need at least {k} points for {k} clusters, got {n}")));
    }
    for attempt in 0..=MAX_RESEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
        if let Some(c) = lloyd(points, dim, k, &mut rng) {
            return Ok(c);
        }
    }
    Err(Error::EmptyCluster(MAX_RESEEDS))
}

fn plus_plus_init(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(pt(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(pt(i), pt(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = pt(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(pt(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn lloyd(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Option<Clustering> {
    let n = points.len() / dim;
    let mut centroids = plus_plus_init(points, dim, k, rng);
    let mut assignment = vec![0usize; n];
    for _ in 0..LLOYD_ITERATIONS {
        let mut changed = false;
        for i in 0..n {
            let p = &points[i * dim..(i + 1) * dim];
            let best = (0..k)
                .map(|c| (c, sq_dist(p, &centroids[c * dim..(c + 1) * dim])))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
                .0;
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for j in 0..dim {
                sums[c * dim + j] += points[i * dim + j];
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            for j in 0..dim {
                centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    Some(Clustering {
        centroids,
        assignment,
        k,
        dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_blobs() {
        let pts = [0.0, 0.1, -0.1, 10.0, 10.1, 9.9];
        let c = kmeans(&pts, 1, 2, 1).unwrap();
        assert_eq!(c.assignment[0], c.assignment[1]);
        assert_eq!(c.assignment[3], c.assignment[5]);
        assert_ne!(c.assignment[0], c.assignment[3]);
        let mut cents = c.centroids.clone();
        cents.sort_by(f64::total_cmp);
        assert!((cents[0] - 0.0).abs() < 1e-12 && (cents[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_cannot_fill_two_clusters() {
        let pts = [1.0, 1.0, 1.0];
        assert!(matches!(kmeans(&pts, 1, 2, 0), Err(Error::EmptyCluster(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let pts: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        assert_eq!(kmeans(&pts, 2, 5, 9).unwrap(), kmeans(&pts, 2, 5, 9).unwrap());
    }
}
