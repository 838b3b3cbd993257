use crate::error::{Error, Result};

/// Positions and velocities of `n` particles in `d` dimensions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub n: usize,
    pub d: usize,
    pub r: Vec<f64>,
    pub v: Vec<f64>,
    pub t_index: usize,
}

impl SystemState {
    pub fn new(n: usize, d: usize, r: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let s = Self { n, d, r, v, t_index: 0 };
        s.validate()?;
        Ok(s)
    }

    /// At rest: velocities zero.
    pub fn at_rest(n: usize, d: usize, r: Vec<f64>) -> Result<Self> {
        Self::new(n, d, r, vec![0.0; n * d])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Invalid("state needs n >= 1 and d >= 1".into()));
        }
        if self.r.len() != self.n * self.d || self.v.len() != self.n * self.d {
            return Err(Error::Invalid(format!(
                "state of {} x {} has {} positions and {} velocities",
                self.n,
                self.d,
                self.r.len(),
                self.v.len()
            )));
        }
        if self.r.iter().chain(&self.v).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("non-finite state entry".into()));
        }
        Ok(())
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.r[i * self.d..(i + 1) * self.d]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.v[i * self.d..(i + 1) * self.d]
    }
}
