use crate::error::{Error, Result};

/// Analytic toy landscapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyPotential {
    /// `a (x0^2 - 1)^2 + (b/2) sum_{j>0} x_j^2`; minima at `x0 = +-1`.
    DoubleWell { a: f64, b: f64 },
    /// Four-Gaussian Müller-Brown surface in two dimensions.
    MullerBrown,
}

impl Default for ToyPotential {
    fn default() -> Self {
        ToyPotential::DoubleWell { a: 1.0, b: 1.0 }
    }
}

const MB_A: [f64; 4] = [-200.0, -100.0, -170.0, 15.0];
const MB_SA: [f64; 4] = [-1.0, -1.0, -6.5, 0.7];
const MB_SB: [f64; 4] = [0.0, 0.0, 11.0, 0.6];
const MB_SC: [f64; 4] = [-10.0, -10.0, -6.5, 0.7];
const MB_X0: [f64; 4] = [1.0, 0.0, -0.5, -1.0];
const MB_Y0: [f64; 4] = [0.0, 0.5, 1.5, 1.0];

impl ToyPotential {
    pub fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        match *self {
            ToyPotential::DoubleWell { a, b } => {
                if x.is_empty() {
                    return Err(Error::Invalid("double well needs at least one coordinate".into()));
                }
                let s = x[0] * x[0] - 1.0;
                let mut u = a * s * s;
                grad[0] = 4.0 * a * x[0] * s;
                for j in 1..x.len() {
                    u += 0.5 * b * x[j] * x[j];
                    grad[j] = b * x[j];
                }
                Ok(u)
            }
            ToyPotential::MullerBrown => {
                if x.len() != 2 {
                    return Err(Error::Invalid(format!(
                        "Müller-Brown is two-dimensional, got {} coordinates",
                        x.len()
                    )));
                }
                let (mut u, mut gx, mut gy) = (0.0, 0.0, 0.0);
                for k in 0..4 {
                    let dx = x[0] - MB_X0[k];
                    let dy = x[1] - MB_Y0[k];
                    let e = MB_A[k] * (MB_SA[k] * dx * dx + MB_SB[k] * dx * dy + MB_SC[k] * dy * dy).exp();
                    u += e;
                    gx += e * (2.0 * MB_SA[k] * dx + MB_SB[k] * dy);
                    gy += e * (MB_SB[k] * dx + 2.0 * MB_SC[k] * dy);
                }
                grad[0] = gx;
                grad[1] = gy;
                Ok(u)
            }
        }
    }

    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; x.len()];
        self.energy_grad(x, &mut g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_well_stationary_points() {
        let dw = ToyPotential::default();
        let mut g = [0.0; 2];
        assert_eq!(dw.energy_grad(&[1.0, 0.0], &mut g).unwrap(), 0.0);
        assert_eq!(dw.energy_grad(&[-1.0, 0.0], &mut g).unwrap(), 0.0);
        assert_eq!(dw.energy_grad(&[0.0, 0.0], &mut g).unwrap(), 1.0);
        assert_eq!(g, [0.0, 0.0]);
    }

    #[test]
    fn muller_brown_global_minimum() {
        // Value of the four-term sum at the tabulated minimum location.
        let u = ToyPotential::MullerBrown.energy(&[-0.5582, 1.4417]).unwrap();
        assert!((u - (-146.6995)).abs() < 1e-3, "{u}");
    }

    #[test]
    fn muller_brown_rejects_wrong_dimension() {
        assert!(ToyPotential::MullerBrown.energy(&[0.0, 0.0, 0.0]).is_err());
    }
}
