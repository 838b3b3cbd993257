//! Distribution distances and path statistics for evaluating rollouts.

mod assignment;

pub use assignment::{assignment_cost, hungarian};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::biasnet::{masked_rmsd, rmsd as aligned_rmsd, TargetSpec};
use crate::dynamics::{SystemState, Trajectory};
use crate::energy::PotentialSpec;
use crate::error::{Error, Result};

/// Largest sample count accepted by the exact assignment solver.
pub const MAX_ASSIGNMENT: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub mmd_bandwidths: Vec<f64>,
    pub thp_radius: f64,
    /// Coordinates (within the flattened `n x d` state) that define the
    /// collective variable; `None` keeps every coordinate.
    pub cv: Option<Vec<usize>>,
    /// Leading coordinates per sample used by the Wasserstein distances;
    /// `None` keeps all.
    pub wasserstein_dims: Option<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            mmd_bandwidths: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            thp_radius: 0.75,
            cv: None,
            wasserstein_dims: Some(2),
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mmd_bandwidths.is_empty() || self.mmd_bandwidths.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("MMD bandwidths must be positive".into()));
        }
        if !(self.thp_radius > 0.0) {
            return Err(Error::Config("THP radius must be positive".into()));
        }
        if self.wasserstein_dims == Some(0) {
            return Err(Error::Config("wasserstein_dims must be positive".into()));
        }
        Ok(())
    }
}

/// A row-major set of `len` samples in `dim` dimensions.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> Samples<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Invalid(format!("{} values do not form rows of width {dim}", data.len())));
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair(x: &Samples, y: &Samples) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Invalid("metric needs nonempty sample sets".into()));
    }
    if x.dim != y.dim {
        return Err(Error::Invalid(format!("sample widths differ: {} vs {}", x.dim, y.dim)));
    }
    Ok(())
}

/// Mean over bandwidths of `exp(-|a-b|^2 / (2 s^2))`.
pub fn mixture_kernel(sq: f64, bandwidths: &[f64]) -> f64 {
    bandwidths.iter().map(|s| (-sq / (2.0 * s * s)).exp()).sum::<f64>() / bandwidths.len() as f64
}

fn mean_kernel(a: &Samples, b: &Samples, bandwidths: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        for j in 0..b.len() {
            total += mixture_kernel(sq_dist(a.row(i), b.row(j)), bandwidths);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Biased (V-statistic) squared MMD under the mixture kernel.
pub fn rbf_mmd(x: Samples, y: Samples, bandwidths: &[f64]) -> Result<f64> {
    check_pair(&x, &y)?;
    if x.len() != y.len() {
        return Err(Error::Invalid("MMD expects equal sample counts; resample first".into()));
    }
    let v = mean_kernel(&x, &x, bandwidths) + mean_kernel(&y, &y, bandwidths) - 2.0 * mean_kernel(&x, &y, bandwidths);
    Ok(v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    W1,
    W2,
}

/// Exact empirical Wasserstein distance between equal-size sets, on the
/// first `dims` coordinates of each sample.
pub fn wasserstein(x: Samples, y: Samples, order: Order, dims: Option<usize>) -> Result<f64> {
    check_pair(&x, &y)?;
    let m = x.len();
    if m != y.len() {
        return Err(Error::Invalid("Wasserstein expects equal sample counts; resample first".into()));
    }
    if m > MAX_ASSIGNMENT {
        return Err(Error::Invalid(format!(
            "{m} samples exceed the exact-assignment limit of {MAX_ASSIGNMENT}; subsample first"
        )));
    }
    let k = dims.unwrap_or(x.dim).min(x.dim);
    let mut cost = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let d = sq_dist(&x.row(i)[..k], &y.row(j)[..k]).sqrt();
            cost[i * m + j] = match order {
                Order::W1 => d,
                Order::W2 => d * d,
            };
        }
    }
    let total = assignment_cost(&cost, m, &hungarian(&cost, m));
    let mean = total / m as f64;
    Ok(match order {
        Order::W1 => mean,
        Order::W2 => mean.max(0.0).sqrt(),
    })
}

/// `count` rows drawn uniformly with replacement.
pub fn resample<R: Rng + ?Sized>(x: Samples, count: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(count * x.dim);
    for _ in 0..count {
        out.extend_from_slice(x.row(rng.random_range(0..x.len())));
    }
    out
}

/// MMD, W1 and W2 between generated samples and a reference distribution.
/// Both sets are resampled with replacement to a common size of at most
/// [`MAX_ASSIGNMENT`]; the generated set is kept as is when it already fits.
pub fn distribution_metrics<R: Rng + ?Sized>(
    generated: Samples,
    reference: Samples,
    config: &MetricsConfig,
    rng: &mut R,
) -> Result<BTreeMap<String, f64>> {
    check_pair(&generated, &reference)?;
    config.validate()?;
    let count = generated.len().min(MAX_ASSIGNMENT);
    let gen = if count == generated.len() {
        generated.data.to_vec()
    } else {
        resample(generated, count, rng)
    };
    let refs = if count == reference.len() {
        reference.data.to_vec()
    } else {
        resample(reference, count, rng)
    };
    let (g, r) = (Samples::new(&gen, generated.dim)?, Samples::new(&refs, generated.dim)?);
    let mut out = BTreeMap::new();
    out.insert("mmd".into(), rbf_mmd(g, r, &config.mmd_bandwidths)?);
    out.insert("w1".into(), wasserstein(g, r, Order::W1, config.wasserstein_dims)?);
    out.insert("w2".into(), wasserstein(g, r, Order::W2, config.wasserstein_dims)?);
    Ok(out)
}

/// Aligned RMSD over the masked particles.
pub fn rmsd(r: &[f64], r_ref: &[f64], d: usize, mask: Option<&[bool]>) -> Result<f64> {
    aligned_rmsd(r, r_ref, d, mask)
}

/// Distance used for endpoint-to-target comparisons: aligned RMSD when the
/// system supports a rigid alignment, otherwise the plain per-particle RMSD
/// (a single particle would otherwise always align perfectly).
pub fn endpoint_rmsd(r: &[f64], r_ref: &[f64], d: usize, mask: Option<&[bool]>) -> Result<f64> {
    let active = match mask {
        Some(m) => m.iter().filter(|&&x| x).count(),
        None => r.len() / d,
    };
    if (d == 2 || d == 3) && active > d {
        aligned_rmsd(r, r_ref, d, mask)
    } else {
        Ok(masked_rmsd(r, r_ref, d, mask))
    }
}

fn project(x: &[f64], cv: Option<&[usize]>) -> Vec<f64> {
    match cv {
        Some(idx) => idx.iter().map(|&i| x[i]).collect(),
        None => x.to_vec(),
    }
}

/// Whether `|xi(R_T) - xi(R_B)| < radius`.
pub fn is_hit(r_t: &[f64], target: &TargetSpec, config: &MetricsConfig) -> bool {
    let cv = config.cv.as_deref();
    sq_dist(&project(r_t, cv), &project(&target.r_b, cv)).sqrt() < config.thp_radius
}

/// Percentage of endpoints inside the target sphere.
pub fn thp(finals: &[&[f64]], target: &TargetSpec, config: &MetricsConfig) -> f64 {
    if finals.is_empty() {
        return 0.0;
    }
    let hits = finals.iter().filter(|r| is_hit(r, target, config)).count();
    100.0 * hits as f64 / finals.len() as f64
}

/// Highest system energy along a path.
pub fn max_energy(states: &[SystemState], potential: &PotentialSpec) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for s in states {
        best = best.max(potential.system_energy(&s.r, s.d)?);
    }
    Ok(best)
}

/// Transition-state energy, defined only for paths that hit the target.
pub fn ets(states: &[SystemState], potential: &PotentialSpec, hit: bool) -> Result<Option<f64>> {
    if !hit {
        return Ok(None);
    }
    max_energy(states, potential).map(Some)
}

/// `sum_k |R_{k+1} - R_k|^2 (1 + max(U(R_k), 0))`: squared path length with
/// steps through high-energy regions counted more heavily.
pub fn weighted_action(traj: &Trajectory, potential: &PotentialSpec) -> Result<f64> {
    let mut total = 0.0;
    for w in traj.states.windows(2) {
        let u = potential.system_energy(&w[0].r, traj.d)?;
        total += sq_dist(&w[1].r, &w[0].r) * (1.0 + u.max(0.0));
    }
    Ok(total)
}

/// Mean and population standard deviation over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            values,
        }
    }
}

/// Per-metric summaries, written as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub repeats: usize,
    pub metrics: BTreeMap<String, Summary>,
}

impl MetricsReport {
    /// Collects `name -> value` maps from each repeat.
    pub fn from_repeats(repeats: &[BTreeMap<String, f64>]) -> Self {
        let mut by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in repeats {
            for (k, v) in r {
                by_name.entry(k.clone()).or_default().push(*v);
            }
        }
        Self {
            repeats: repeats.len(),
            metrics: by_name.into_iter().map(|(k, v)| (k, Summary::of(v))).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(data: &[f64], dim: usize) -> Samples<'_> {
        Samples::new(data, dim).unwrap()
    }

    #[test]
    fn mmd_examples() {
        let x = [0.0];
        let y = [1.0];
        let single = rbf_mmd(s(&x, 1), s(&y, 1), &[1.0]).unwrap();
        assert!((single - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((single - 0.786939).abs() < 1e-6);
        let bw = MetricsConfig::default().mmd_bandwidths;
        let mix = rbf_mmd(s(&x, 1), s(&y, 1), &bw).unwrap();
        let hand: f64 = bw.iter().map(|b| 2.0 - 2.0 * (-0.5 / (b * b)).exp()).sum::<f64>() / 5.0;
        assert!((mix - hand).abs() < 1e-12);
        assert_eq!(rbf_mmd(s(&[0.3, 2.0], 1), s(&[0.3, 2.0], 1), &bw).unwrap(), 0.0);
        assert!(rbf_mmd(s(&[], 1), s(&[], 1), &bw).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        let a = [0.0, 0.0, 1.0, 0.0];
        let b = [0.0, 1.0, 1.0, 1.0];
        for o in [Order::W1, Order::W2] {
            assert!((wasserstein(s(&a, 2), s(&b, 2), o, None).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(wasserstein(s(&a, 2), s(&a, 2), o, None).unwrap(), 0.0);
            let d = wasserstein(s(&[0.0, 0.0], 2), s(&[3.0, 4.0], 2), o, None).unwrap();
            assert!((d - 5.0).abs() < 1e-12);
        }
        let big = vec![0.0; MAX_ASSIGNMENT + 1];
        assert!(wasserstein(s(&big, 1), s(&big, 1), Order::W1, None).is_err());
    }

    #[test]
    fn thp_examples() {
        let cfg = MetricsConfig::default();
        let t = TargetSpec::new(1, 2, vec![1.0, 0.0], 0.1).unwrap();
        let inside: [&[f64]; 4] = [&[1.0, 0.0], &[1.5, 0.0], &[0.5, 0.2], &[-1.0, 0.0]];
        assert_eq!(thp(&inside, &t, &cfg), 75.0);
        assert_eq!(thp(&[&[1.0, 0.0]], &t, &cfg), 100.0);
        assert_eq!(thp(&[&[-1.0, 0.0]], &t, &cfg), 0.0);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(vec![1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
