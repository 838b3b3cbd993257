//! Potential-energy landscapes with analytic gradients.

mod kmeans;
mod rbf;
mod toy;

use std::sync::Arc;

pub use kmeans::{kmeans, Clustering, LLOYD_ITERATIONS, MAX_RESEEDS};
pub use rbf::{RbfFit, RbfManifold, DEFAULT_ALPHA, DEFAULT_EPS};
pub use toy::ToyPotential;

use crate::error::{Error, Result};

/// Any landscape the dynamics can integrate against. Energies of an
/// `n`-particle configuration are the sum of per-particle energies.
#[derive(Debug, Clone)]
pub enum PotentialSpec {
    Toy(ToyPotential),
    Manifold(Arc<RbfManifold>),
}

impl PotentialSpec {
    /// Per-particle coordinate count the potential expects, if fixed.
    pub fn dim(&self) -> Option<usize> {
        match self {
            PotentialSpec::Toy(ToyPotential::MullerBrown) => Some(2),
            PotentialSpec::Toy(ToyPotential::DoubleWell { .. }) => None,
            PotentialSpec::Manifold(m) => Some(m.dim()),
        }
    }

    pub fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        match self {
            PotentialSpec::Toy(t) => t.energy_grad(x, grad),
            PotentialSpec::Manifold(m) => m.energy_grad(x, grad),
        }
    }

    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; x.len()];
        self.energy_grad(x, &mut g)
    }

    /// `U(R) = sum_i U(r_i)` for row-major `R` with `d` columns; writes `grad`
    /// with the same layout.
    pub fn system_energy_grad(&self, r: &[f64], d: usize, grad: &mut [f64]) -> Result<f64> {
        if d == 0 || r.len() % d != 0 || grad.len() != r.len() {
            return Err(Error::Invalid(format!(
                "configuration of length {} is not a multiple of d = {d}",
                r.len()
            )));
        }
        let mut total = 0.0;
        for (x, g) in r.chunks_exact(d).zip(grad.chunks_exact_mut(d)) {
            total += self.energy_grad(x, g)?;
        }
        Ok(total)
    }

    pub fn system_energy(&self, r: &[f64], d: usize) -> Result<f64> {
        let mut g = vec![0.0; r.len()];
        self.system_energy_grad(r, d, &mut g)
    }
}

impl From<ToyPotential> for PotentialSpec {
    fn from(t: ToyPotential) -> Self {
        PotentialSpec::Toy(t)
    }
}

impl From<RbfManifold> for PotentialSpec {
    fn from(m: RbfManifold) -> Self {
        PotentialSpec::Manifold(Arc::new(m))
    }
}
