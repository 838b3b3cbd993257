//! Central finite-difference oracle for graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::ParamSet;
use super::graph::{Bindings, Graph, Mode, NodeId};
use crate::error::Result;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Floor for the relative-error denominator; gradients smaller than this are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares reverse-mode gradients of the scalar `loss` in `graph` against
/// central differences with step `h`. Every leaf in `params` is perturbed
/// (all are bound as trainable parameters). With `max_entries`, at most that
/// many entries per tensor are checked, chosen by `seed`.
pub fn check(
    graph: &Graph,
    loss: NodeId,
    params: &ParamSet,
    inputs: &ParamSet,
    mode: Mode,
    h: f64,
    max_entries: Option<(usize, u64)>,
) -> Result<GradCheck> {
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut b = Bindings::new();
        b.bind_all(p.iter()).bind_all(inputs.iter());
        Ok(graph.evaluate(loss, &b, mode)?.get(loss)?.item())
    };
    let mut b = Bindings::new();
    b.bind_all(params.iter()).bind_all(inputs.iter());
    let values = graph.evaluate(loss, &b, mode)?;
    let grads = graph.gradients(&values, loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut rng = max_entries.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut probe = params.clone();
    for (name, tensor) in params {
        let entries: Vec<usize> = match (max_entries, rng.as_mut()) {
            (Some((k, _)), Some(rng)) if k < tensor.numel() => sample(rng, tensor.numel(), k).into_vec(),
            _ => (0..tensor.numel()).collect(),
        };
        for i in entries {
            let orig = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(analytic, numeric, REL_FLOOR));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        checked,
    })
}
