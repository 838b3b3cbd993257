//! The entangled bias force: per-particle tokens, a set Transformer, and the
//! cone-constrained assembly `b = softplus(a) s + (I - s s^T) h`.

mod kabsch;
mod network;

pub use kabsch::{kabsch_align, masked_rmsd, rmsd, Alignment};
pub use network::{sidecar_path, BatchFeatures, BiasNetwork, Frame, NetConfig, Sidecar};

use crate::autodiff::softplus;
use crate::dynamics::SystemState;
use crate::error::{Error, Result};

/// Below this separation the target direction is undefined and the bias is zero.
pub const COINCIDENT: f64 = 1e-9;

/// Gaussian terminal target of radius `sigma` around `r_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub n: usize,
    pub d: usize,
    pub r_b: Vec<f64>,
    pub sigma: f64,
}

impl TargetSpec {
    pub fn new(n: usize, d: usize, r_b: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Invalid(format!("target radius must be positive, got {sigma}")));
        }
        if r_b.len() != n * d || r_b.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!("target needs {} finite coordinates", n * d)));
        }
        Ok(Self { n, d, r_b, sigma })
    }

    fn check(&self, state: &SystemState) -> Result<()> {
        if state.n != self.n || state.d != self.d {
            return Err(Error::Invalid(format!(
                "state is {} x {} but target is {} x {}",
                state.n, state.d, self.n, self.d
            )));
        }
        Ok(())
    }
}

/// Feature width per particle: position, velocity, direction, distance.
pub fn token_dim(d: usize) -> usize {
    3 * d + 1
}

/// Row-major `n x (3d + 1)` tokens `[r_i; v_i or 0; r_B,i - r_i; |r_B,i - r_i|]`.
pub fn build_features(state: &SystemState, target: &TargetSpec, velocity_conditioning: bool) -> Result<Vec<f64>> {
    target.check(state)?;
    let mut out = Vec::with_capacity(state.n * token_dim(state.d));
    push_tokens(&state.r, &state.v, &target.r_b, state.d, velocity_conditioning, &mut out);
    Ok(out)
}

fn push_tokens(r: &[f64], v: &[f64], r_b: &[f64], d: usize, velocity: bool, out: &mut Vec<f64>) {
    for ((ri, vi), bi) in r.chunks_exact(d).zip(v.chunks_exact(d)).zip(r_b.chunks_exact(d)) {
        out.extend_from_slice(ri);
        if velocity {
            out.extend_from_slice(vi);
        } else {
            out.extend(std::iter::repeat_n(0.0, d));
        }
        let start = out.len();
        out.extend(bi.iter().zip(ri).map(|(b, r)| b - r));
        let dist = out[start..].iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push(dist);
    }
}

/// Unit vector along `to - from`, or `None` when the points coincide.
pub fn unit_direction(from: &[f64], to: &[f64]) -> Option<Vec<f64>> {
    let diff: Vec<f64> = to.iter().zip(from).map(|(b, a)| b - a).collect();
    let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm >= COINCIDENT).then(|| diff.into_iter().map(|x| x / norm).collect())
}

/// `softplus(alpha_raw) s + (I - s s^T) h` written to `b`; zero when `s` is
/// undefined. Returns the nonnegative parallel magnitude.
pub fn assemble(alpha_raw: f64, h: &[f64], s_hat: Option<&[f64]>, b: &mut [f64]) -> f64 {
    let Some(s) = s_hat else {
        b.iter_mut().for_each(|x| *x = 0.0);
        return 0.0;
    };
    let alpha = softplus(alpha_raw);
    let sh: f64 = s.iter().zip(h).map(|(a, c)| a * c).sum();
    for ((bj, &sj), &hj) in b.iter_mut().zip(s).zip(h) {
        *bj = alpha * sj + (hj - sh * sj);
    }
    alpha
}

/// Network outputs for one system, all in the caller's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasOutput {
    pub alpha: Vec<f64>,
    pub h: Vec<f64>,
    /// Zero rows where the direction is undefined.
    pub s_hat: Vec<f64>,
    pub b: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let s = SystemState::new(1, 2, vec![0.0, 0.0], vec![7.0, -1.0]).unwrap();
        let t = TargetSpec::new(1, 2, vec![3.0, 4.0], 0.1).unwrap();
        assert_eq!(build_features(&s, &t, true).unwrap(), vec![0.0, 0.0, 7.0, -1.0, 3.0, 4.0, 5.0]);
        assert_eq!(build_features(&s, &t, false).unwrap(), vec![0.0, 0.0, 0.0, 0.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn coincident_target_gives_zero_direction() {
        let s = SystemState::new(1, 3, vec![1.0, 2.0, 3.0], vec![0.5; 3]).unwrap();
        let t = TargetSpec::new(1, 3, vec![1.0, 2.0, 3.0], 0.1).unwrap();
        let f = build_features(&s, &t, true).unwrap();
        assert!(f[6..].iter().all(|&x| x == 0.0));
        assert!(unit_direction(&s.r, &t.r_b).is_none());
        let mut b = [9.0; 3];
        assert_eq!(assemble(3.0, &[1.0, 1.0, 1.0], None, &mut b), 0.0);
        assert_eq!(b, [0.0; 3]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = SystemState::at_rest(2, 2, vec![0.0; 4]).unwrap();
        let t = TargetSpec::new(1, 2, vec![0.0; 2], 0.1).unwrap();
        assert!(build_features(&s, &t, true).is_err());
    }

    #[test]
    fn zero_h_gives_pure_parallel_force() {
        let s = [0.6, 0.8];
        let mut b = [0.0; 2];
        let a = assemble(0.3, &[0.0, 0.0], Some(&s), &mut b);
        assert_eq!(b, [a * 0.6, a * 0.8]);
        assert_eq!(a, softplus(0.3));
    }
}
