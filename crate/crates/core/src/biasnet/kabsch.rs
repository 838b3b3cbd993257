//! Optimal rigid superposition of matched point sets.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `aligned_i = rotation * r_i + translation`, rotation row-major `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub d: usize,
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
    pub aligned: Vec<f64>,
}

impl Alignment {
    pub fn rotate(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        for a in 0..d {
            out[a] = (0..d).map(|b| self.rotation[a * d + b] * x[b]).sum();
        }
    }

    /// Applies the transpose (inverse) rotation.
    pub fn rotate_back(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        for a in 0..d {
            out[a] = (0..d).map(|b| self.rotation[b * d + a] * x[b]).sum();
        }
    }

    /// Applies the full rigid motion to another row-major point set.
    pub fn transform(&self, points: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; points.len()];
        for (p, o) in points.chunks_exact(self.d).zip(out.chunks_exact_mut(self.d)) {
            self.rotate(p, o);
            for (v, t) in o.iter_mut().zip(&self.translation) {
                *v += t;
            }
        }
        out
    }
}

/// Rigid motion (proper rotation plus translation) of `r` that minimizes the
/// squared deviation from `r_ref` over the particles selected by `mask`
/// (all particles when `None`). Both sets are row-major `n x d`.
pub fn kabsch_align(r: &[f64], r_ref: &[f64], d: usize, mask: Option<&[bool]>) -> Result<Alignment> {
    if !(d == 2 || d == 3) {
        return Err(Error::Invalid(format!("Kabsch alignment needs d in {{2, 3}}, got {d}")));
    }
    if r.len() != r_ref.len() || r.len() % d != 0 {
        return Err(Error::Invalid(format!(
            "point sets of length {} and {} do not match in d = {d}",
            r.len(),
            r_ref.len()
        )));
    }
    let n = r.len() / d;
    let selected: Vec<usize> = match mask {
        Some(m) if m.len() != n => {
            return Err(Error::Invalid(format!("mask has {} entries for {n} particles", m.len())));
        }
        Some(m) => (0..n).filter(|&i| m[i]).collect(),
        None => (0..n).collect(),
    };
    if selected.len() < d {
        return Err(Error::Degenerate(format!("{} masked particles, need at least {d}", selected.len())));
    }
    let k = selected.len() as f64;
    let mut cp = vec![0.0; d];
    let mut cq = vec![0.0; d];
    for &i in &selected {
        for a in 0..d {
            cp[a] += r[i * d + a] / k;
            cq[a] += r_ref[i * d + a] / k;
        }
    }
    let mut h = DMatrix::<f64>::zeros(d, d);
    for &i in &selected {
        for a in 0..d {
            for b in 0..d {
                h[(a, b)] += (r[i * d + a] - cp[a]) * (r_ref[i * d + b] - cq[b]);
            }
        }
    }
    let svd = h.clone().svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = svd.singular_values.as_slice().to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    // the rotation is unique once d - 1 directions are pinned down
    let scale = s[0].max(f64::MIN_POSITIVE);
    if s[0] <= 1e-300 || s[d - 2] <= 1e-12 * scale {
        return Err(Error::Degenerate(format!("covariance singular values {s:?}")));
    }
    let v = v_t.transpose();
    let ut = u.transpose();
    let det = (&v * &ut).determinant();
    let mut fix = DMatrix::<f64>::identity(d, d);
    fix[(d - 1, d - 1)] = det.signum();
    let rot = v * fix * ut;

    let mut rotation = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            rotation[a * d + b] = rot[(a, b)];
        }
    }
    let translation: Vec<f64> = (0..d)
        .map(|a| cq[a] - (0..d).map(|b| rotation[a * d + b] * cp[b]).sum::<f64>())
        .collect();
    let mut out = Alignment {
        d,
        rotation,
        translation,
        aligned: Vec::new(),
    };
    out.aligned = out.transform(r);
    Ok(out)
}

/// Root-mean-square deviation over masked particles after optimal alignment
/// of `r` onto `r_ref`.
pub fn rmsd(r: &[f64], r_ref: &[f64], d: usize, mask: Option<&[bool]>) -> Result<f64> {
    let al = kabsch_align(r, r_ref, d, mask)?;
    Ok(masked_rmsd(&al.aligned, r_ref, d, mask))
}

/// RMSD without any alignment.
pub fn masked_rmsd(r: &[f64], r_ref: &[f64], d: usize, mask: Option<&[bool]>) -> f64 {
    let n = r.len() / d;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        total += (0..d).map(|a| (r[i * d + a] - r_ref[i * d + a]).powi(2)).sum::<f64>();
        count += 1;
    }
    if count == 0 {
        return 0.0;
    }
    (total / count as f64).sqrt()
}
