//! Terminal reward, the discretized path functional and the training losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Gradients, Graph, Mode, NodeId, ParamSet, Tensor};
use crate::biasnet::{BiasNetwork, TargetSpec};
use crate::dynamics::{SystemState, Trajectory};
use crate::error::{Error, Result};

/// Name of the log-variance control variate inside gradient maps.
pub const LV_PARAM: &str = "lv.w";

/// `-|R_T - R_B|^2 / (2 sigma^2)`, the Gaussian log-density up to a constant.
pub fn terminal_reward(r_t: &[f64], target: &TargetSpec) -> Result<f64> {
    if !(target.sigma > 0.0) {
        return Err(Error::Invalid(format!("target radius must be positive, got {}", target.sigma)));
    }
    if r_t.len() != target.r_b.len() {
        return Err(Error::Invalid(format!(
            "endpoint has {} coordinates, target {}",
            r_t.len(),
            target.r_b.len()
        )));
    }
    let sq: f64 = r_t.iter().zip(&target.r_b).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-sq / (2.0 * target.sigma * target.sigma))
}

/// Reward and log-densities of one stored path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathScore {
    pub reward: f64,
    pub log_p0: f64,
    pub log_pb: f64,
    /// `reward + log_p0 - log_pb`
    pub log_weight: f64,
}

impl PathScore {
    pub fn of(traj: &Trajectory) -> Self {
        Self {
            reward: traj.reward,
            log_p0: traj.log_p0,
            log_pb: traj.log_pb,
            log_weight: traj.reward + traj.log_p0 - traj.log_pb,
        }
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Self-normalized importance weights of a batch.
pub fn batch_weights(scores: &[PathScore]) -> Vec<f64> {
    softmax(&scores.iter().map(|s| s.log_weight).collect::<Vec<_>>())
}

/// `1/2 sum |b|^2 dt - sum b . bbar dt - sum b . dW` for controls `b_theta`
/// laid out `K x n x d` like the trajectory's stored arrays.
pub fn f_hat(traj: &Trajectory, b_theta: &[f64]) -> Result<f64> {
    if b_theta.len() != traj.behavior_bias.len() {
        return Err(Error::Invalid(format!(
            "{} control values for a trajectory with {}",
            b_theta.len(),
            traj.behavior_bias.len()
        )));
    }
    let dt = traj.dt;
    Ok(b_theta
        .iter()
        .zip(&traj.behavior_bias)
        .zip(&traj.noise)
        .map(|((b, bb), w)| 0.5 * b * b * dt - b * bb * dt - b * w)
        .sum())
}

/// `sum_b w_b F_b`.
pub fn ce_value(weights: &[f64], f_hats: &[f64]) -> Result<f64> {
    if weights.is_empty() || weights.len() != f_hats.len() {
        return Err(Error::Invalid("cross-entropy needs a nonempty batch of matching length".into()));
    }
    Ok(weights.iter().zip(f_hats).map(|(w, f)| w * f).sum())
}

/// `mean_b (G_b - w)^2` with `G_b = F_b + r_b`.
pub fn lv_value(g: &[f64], w: f64) -> Result<f64> {
    if g.is_empty() {
        return Err(Error::Invalid("log-variance needs a nonempty batch".into()));
    }
    Ok(g.iter().map(|x| (x - w) * (x - w)).sum::<f64>() / g.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ce,
    Lv,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::Ce),
            "lv" => Ok(Self::Lv),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ce => "ce",
            Self::Lv => "lv",
        })
    }
}

/// Scalar control variate of the log-variance loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LvState {
    pub w: f64,
}

/// Loss value and gradients for every network parameter (plus [`LV_PARAM`]
/// for the log-variance objective).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
}

/// A differentiable loss over a slice of a batch, ready for evaluation.
pub struct ChunkGraph {
    pub graph: Graph,
    pub loss: NodeId,
    /// Non-trainable leaves.
    pub inputs: ParamSet,
}

/// Builds the loss contribution of `trajs`. `coef` holds the per-trajectory
/// weight `w*_b` (cross-entropy) and is ignored for log-variance, where
/// `batch_len` normalizes the mean.
pub fn chunk_graph(
    net: &BiasNetwork,
    trajs: &[&Trajectory],
    coef: &[f64],
    objective: Objective,
    batch_len: usize,
) -> Result<ChunkGraph> {
    let first = trajs.first().ok_or_else(|| Error::Invalid("empty loss chunk".into()))?;
    let (n, d, k) = (first.n, first.d, first.steps());
    if trajs.iter().any(|t| t.n != n || t.d != d || t.steps() != k || t.dt != first.dt) {
        return Err(Error::Invalid("loss chunk mixes trajectory shapes".into()));
    }
    let bc = trajs.len();
    let items: Vec<(&SystemState, &TargetSpec)> = trajs
        .iter()
        .flat_map(|t| t.states[..k].iter().map(move |s| (s, &t.target)))
        .collect();
    let feats = net.features(&items)?;
    let m = n * d;
    let dt = first.dt;
    let mut coupling = Vec::with_capacity(bc * k * m);
    for (b, t) in trajs.iter().enumerate() {
        for step in 0..k {
            let r = t.block(&t.noise, step);
            let raw: Vec<f64> = t.behavior_bias[r.clone()]
                .iter()
                .zip(&t.noise[r])
                .map(|(bb, w)| bb * dt + w)
                .collect();
            coupling.extend(feats.to_network_frame(b * k + step, &raw));
        }
    }

    let mut g = Graph::new();
    let bias = net.bias_graph(&mut g, bc * k, n);
    let c = g.input("coupling");
    let sq = g.square(bias);
    let sq = g.scale(sq, 0.5 * dt);
    let cross = g.mul(bias, c);
    let term = g.sub(sq, cross);
    let per_traj = g.reshape(term, &[bc, k * m]);
    let f = g.sum(per_traj, 1);

    let mut inputs = ParamSet::new();
    inputs.insert("tokens".into(), feats.tokens);
    inputs.insert("s_hat".into(), feats.s_hat);
    inputs.insert("defined".into(), feats.defined);
    inputs.insert("coupling".into(), Tensor::new(vec![bc * k, n, d], coupling)?);
    let loss = match objective {
        Objective::Ce => {
            if coef.len() != bc {
                return Err(Error::Invalid("one weight per trajectory required".into()));
            }
            inputs.insert("weights".into(), Tensor::new(vec![bc], coef.to_vec())?);
            let w = g.input("weights");
            let wf = g.mul(f, w);
            g.sum(wf, 0)
        }
        Objective::Lv => {
            let rewards: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
            inputs.insert("rewards".into(), Tensor::new(vec![bc], rewards)?);
            let r = g.input("rewards");
            let big_g = g.add(f, r);
            let big_g = g.reshape(big_g, &[bc, 1]);
            let w = g.param(LV_PARAM);
            let w = g.broadcast(w, &[bc, 1]);
            let diff = g.sub(big_g, w);
            let sq = g.square(diff);
            let total = g.sum_all(sq, bc);
            g.scale(total, 1.0 / batch_len as f64)
        }
    };
    Ok(ChunkGraph { graph: g, loss, inputs })
}

/// Loss and gradients over a whole batch, processed `chunk` trajectories at a
/// time (the loss is a sum of per-trajectory terms, so chunk gradients add).
/// Cross-entropy weights come from the batch softmax of the stored log
/// weights and carry no gradient.
pub fn loss_and_gradients(
    net: &BiasNetwork,
    batch: &[&Trajectory],
    objective: Objective,
    lv: LvState,
    mode: Mode,
    chunk: usize,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let weights = batch_weights(&batch.iter().map(|t| PathScore::of(t)).collect::<Vec<_>>());
    let lv_tensor = Tensor::scalar(lv.w);
    let mut total = 0.0;
    let mut grads = Gradients::new();
    for (c, (trajs, w)) in batch.chunks(chunk.max(1)).zip(weights.chunks(chunk.max(1))).enumerate() {
        let cg = chunk_graph(net, trajs, w, objective, batch.len())?;
        let mut b = Bindings::new();
        b.bind_all(net.params().iter()).bind_all(cg.inputs.iter());
        if objective == Objective::Lv {
            b.bind(LV_PARAM, &lv_tensor);
        }
        let chunk_mode = match mode {
            Mode::Eval => Mode::Eval,
            Mode::Train { seed } => Mode::Train {
                seed: seed.wrapping_add((c as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)),
            },
        };
        let values = cg.graph.evaluate(cg.loss, &b, chunk_mode)?;
        total += values.get(cg.loss)?.item();
        for (name, g) in cg.graph.gradients(&values, cg.loss)? {
            match grads.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, x)| *a += x),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    Ok(LossOutput { loss: total, grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        let t = TargetSpec::new(1, 2, vec![1.0, 2.0], 0.1).unwrap();
        assert_eq!(terminal_reward(&[1.0, 2.0], &t).unwrap(), 0.0);
        let r = terminal_reward(&[1.1, 2.0], &t).unwrap();
        assert!((r + 0.5).abs() < 1e-12);
    }

    #[test]
    fn weights_examples() {
        let s = |l: f64| PathScore {
            reward: 0.0,
            log_p0: 0.0,
            log_pb: 0.0,
            log_weight: l,
        };
        let w = batch_weights(&[s(0.0), s(3f64.ln())]);
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        let u = batch_weights(&[s(2.0), s(2.0), s(2.0), s(2.0)]);
        assert!(u.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let shifted = batch_weights(&[s(1e3), s(1e3 + 3f64.ln())]);
        assert!((shifted[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn lv_examples() {
        assert_eq!(lv_value(&[1.0, 3.0], 0.0).unwrap(), 5.0);
        assert_eq!(lv_value(&[2.5, 2.5], 2.5).unwrap(), 0.0);
        // the batch mean minimizes over w
        let g = [0.3, -1.0, 4.0];
        let mean = g.iter().sum::<f64>() / 3.0;
        for dw in [-0.1, 0.1] {
            assert!(lv_value(&g, mean).unwrap() < lv_value(&g, mean + dw).unwrap());
        }
    }

    #[test]
    fn empty_batches_rejected() {
        assert!(ce_value(&[], &[]).is_err());
        assert!(lv_value(&[], 0.0).is_err());
    }
}
