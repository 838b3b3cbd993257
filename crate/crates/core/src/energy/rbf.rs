//! Data-manifold energy built from a fitted radial-basis "on-manifold"
//! indicator `h(x) ~ 1`.

use nalgebra::{DMatrix, DVector};

use super::kmeans::kmeans;
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 1.0;
const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RbfManifold {
    dim: usize,
    /// `n_centers x dim`
    centroids: Vec<f64>,
    bandwidths: Vec<f64>,
    /// `n_centers x dim`, one weight column per coordinate
    weights: Vec<f64>,
    pub kappa: f64,
    pub eps: f64,
    pub alpha_exp: f64,
}

/// Fit settings beyond the data itself.
#[derive(Debug, Clone, Copy)]
pub struct RbfFit {
    pub n_centers: usize,
    pub kappa: f64,
    pub seed: u64,
}

impl RbfManifold {
    /// Clusters `data` (`P x dim`, row-major), sets bandwidths from the
    /// within-cluster mean squared distance and solves the nonnegative
    /// ridge least-squares problem `h_j(x_i) ~ 1`.
    pub fn fit(data: &[f64], dim: usize, fit: RbfFit) -> Result<Self> {
        if !(fit.kappa > 0.0) {
            return Err(Error::Invalid(format!("kappa must be positive, got {}", fit.kappa)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite value in point cloud".into()));
        }
        let clusters = kmeans(data, dim, fit.n_centers, fit.seed)?;
        let k = clusters.k;
        let n = data.len() / dim;
        let mut msd = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = clusters.assignment[i];
            counts[c] += 1;
            msd[c] += (0..dim)
                .map(|j| (data[i * dim + j] - clusters.centroids[c * dim + j]).powi(2))
                .sum::<f64>();
        }
        let bandwidths: Vec<f64> = msd
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| {
                // a cluster of identical points gets a vanishingly narrow kernel
                let mean = (s / c as f64).max(1e-12);
                0.5 * (fit.kappa * mean).powi(-2)
            })
            .collect();

        let mut manifold = Self {
            dim,
            centroids: clusters.centroids,
            bandwidths,
            weights: vec![0.0; k * dim],
            kappa: fit.kappa,
            eps: DEFAULT_EPS,
            alpha_exp: DEFAULT_ALPHA,
        };
        let phi = DMatrix::from_fn(n, k, |i, m| manifold.kernel(m, &data[i * dim..(i + 1) * dim]));
        let gram = phi.transpose() * &phi + DMatrix::identity(k, k) * RIDGE;
        // every coordinate regresses onto the same all-ones target
        let rhs = phi.transpose() * DVector::from_element(n, 1.0);
        let omega = nnls(&gram, &rhs)?;
        for m in 0..k {
            for j in 0..dim {
                manifold.weights[m * dim + j] = omega[m];
            }
        }
        Ok(manifold)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_centers(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn kernel(&self, m: usize, x: &[f64]) -> f64 {
        let c = &self.centroids[m * self.dim..(m + 1) * self.dim];
        let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        (-0.5 * self.bandwidths[m] * d2).exp()
    }

    /// `h_j(x)` for every coordinate `j`.
    pub fn indicator(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.dim];
        for m in 0..self.n_centers() {
            let phi = self.kernel(m, x);
            for j in 0..self.dim {
                h[j] += self.weights[m * self.dim + j] * phi;
            }
        }
        h
    }

    /// `U(x) = sum_j log(M_j(x) + eps)` with `M_j = (h_j + eps)^-alpha`,
    /// low on the data manifold and high away from it. Writes `grad U`.
    pub fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Invalid(format!(
                "manifold is {}-dimensional, got {} coordinates",
                self.dim,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite coordinate".into()));
        }
        let d = self.dim;
        let mut h = vec![0.0; d];
        // dh[j * d + l] = d h_j / d x_l
        let mut dh = vec![0.0; d * d];
        for m in 0..self.n_centers() {
            let phi = self.kernel(m, x);
            if phi == 0.0 {
                continue;
            }
            let c = &self.centroids[m * d..(m + 1) * d];
            let lam = self.bandwidths[m];
            for j in 0..d {
                let wphi = self.weights[m * d + j] * phi;
                h[j] += wphi;
                for l in 0..d {
                    dh[j * d + l] -= wphi * lam * (x[l] - c[l]);
                }
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut u = 0.0;
        for j in 0..d {
            let base = h[j] + self.eps;
            let big_m = base.powf(-self.alpha_exp);
            u += (big_m + self.eps).ln();
            let dm_dh = -self.alpha_exp * base.powf(-self.alpha_exp - 1.0);
            let coef = dm_dh / (big_m + self.eps);
            for l in 0..d {
                grad[l] += coef * dh[j * d + l];
            }
        }
        Ok(u)
    }

    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; x.len()];
        self.energy_grad(x, &mut g)
    }

    /// Mean of `(1 - h_j(x))^2` over points and coordinates.
    pub fn fit_residual(&self, data: &[f64]) -> f64 {
        let n = data.len() / self.dim;
        let mut total = 0.0;
        for i in 0..n {
            for h in self.indicator(&data[i * self.dim..(i + 1) * self.dim]) {
                total += (1.0 - h).powi(2);
            }
        }
        total / data.len() as f64
    }

    pub fn to_tensors(&self) -> ParamSet {
        let k = self.n_centers();
        let mut p = ParamSet::new();
        p.insert(
            "centroids".into(),
            Tensor::new(vec![k, self.dim], self.centroids.clone()).expect("consistent shape"),
        );
        p.insert(
            "bandwidths".into(),
            Tensor::new(vec![k], self.bandwidths.clone()).expect("consistent shape"),
        );
        p.insert(
            "weights".into(),
            Tensor::new(vec![k, self.dim], self.weights.clone()).expect("consistent shape"),
        );
        p.insert(
            "hyper".into(),
            Tensor::new(vec![3], vec![self.kappa, self.eps, self.alpha_exp]).expect("consistent shape"),
        );
        p
    }

    pub fn from_tensors(p: &ParamSet) -> Result<Self> {
        let get = |name: &str| {
            p.get(name)
                .ok_or_else(|| Error::Checkpoint(format!("manifold checkpoint lacks `{name}`")))
        };
        let (c, b, w, hyper) = (get("centroids")?, get("bandwidths")?, get("weights")?, get("hyper")?);
        if c.rank() != 2 || w.shape() != c.shape() || b.shape() != [c.shape()[0]] || hyper.numel() != 3 {
            return Err(Error::Checkpoint("inconsistent manifold tensor shapes".into()));
        }
        if b.data().iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Checkpoint("bandwidths must be positive".into()));
        }
        Ok(Self {
            dim: c.shape()[1],
            centroids: c.data().to_vec(),
            bandwidths: b.data().to_vec(),
            weights: w.data().to_vec(),
            kappa: hyper.data()[0],
            eps: hyper.data()[1],
            alpha_exp: hyper.data()[2],
        })
    }
}

/// Lawson-Hanson active-set solver for `min 1/2 w'Gw - c'w` subject to
/// `w >= 0`, with `G` symmetric positive definite.
fn nnls(gram: &DMatrix<f64>, c: &DVector<f64>) -> Result<Vec<f64>> {
    let p = c.len();
    let tol = 1e-12 * c.amax().max(1.0);
    let mut w = vec![0.0; p];
    let mut passive = vec![false; p];

    let solve_passive = |passive: &[bool]| -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..p).filter(|&i| passive[i]).collect();
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| gram[(idx[a], idx[b])]);
        let rhs = DVector::from_fn(idx.len(), |a, _| c[idx[a]]);
        let chol = sub.cholesky().ok_or(Error::Singular)?;
        let z = chol.solve(&rhs);
        let mut full = vec![0.0; p];
        for (a, &i) in idx.iter().enumerate() {
            full[i] = z[a];
        }
        Ok(full)
    };

    for _ in 0..3 * p + 10 {
        let gw = gram * DVector::from_column_slice(&w);
        let dual: Vec<f64> = (0..p).map(|i| c[i] - gw[i]).collect();
        let candidate = (0..p)
            .filter(|&i| !passive[i] && dual[i] > tol)
            .max_by(|&a, &b| dual[a].total_cmp(&dual[b]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let z = solve_passive(&passive)?;
            let infeasible: Vec<usize> = (0..p).filter(|&i| passive[i] && z[i] <= 0.0).collect();
            if infeasible.is_empty() {
                w = z;
                break;
            }
            let step = infeasible
                .iter()
                .map(|&i| w[i] / (w[i] - z[i]))
                .fold(f64::INFINITY, f64::min);
            for i in 0..p {
                w[i] += step * (z[i] - w[i]);
                if passive[i] && w[i] <= tol {
                    passive[i] = false;
                    w[i] = 0.0;
                }
            }
            if !passive.iter().any(|&b| b) {
                break;
            }
        }
    }
    Ok(w)
}
