//! Internal consistency suites: gradients against finite differences, path
//! density identities, bias positivity and metric oracles.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck, Graph, Mode, NodeId, ParamSet, Tensor};
use crate::biasnet::{assemble, BiasNetwork, NetConfig, TargetSpec};
use crate::dynamics::{rollout, DynamicsParams, Integrator, SystemState};
use crate::energy::{PotentialSpec, ToyPotential};
use crate::error::Result;
use crate::metrics::{assignment_cost, hungarian, rbf_mmd, wasserstein, MetricsConfig, Order, Samples};
use crate::objective::f_hat;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Gradient tolerance for every finite-difference comparison.
pub const GRAD_TOL: f64 = 1e-4;
pub const DENSITY_TOL: f64 = 1e-8;

/// A scalar test graph: `sum(op(leaves) * c)`.
struct Case {
    graph: Graph,
    loss: NodeId,
    params: ParamSet,
    inputs: ParamSet,
    mode: Mode,
}

fn case(
    rng: &mut ChaCha8Rng,
    leaves: &[(&str, &[usize], f64, f64)],
    out: &[usize],
    mode: Mode,
    build: impl FnOnce(&mut Graph, &[NodeId]) -> NodeId,
) -> Case {
    let mut g = Graph::new();
    let mut params = ParamSet::new();
    let ids: Vec<NodeId> = leaves
        .iter()
        .map(|(name, shape, lo, hi)| {
            params.insert(name.to_string(), Tensor::uniform(shape, *lo, *hi, rng));
            g.param(name)
        })
        .collect();
    let y = build(&mut g, &ids);
    let c = g.input("c");
    let yc = g.mul(y, c);
    let numel = out.iter().product();
    let loss = g.sum_all(yc, numel);
    let mut inputs = ParamSet::new();
    inputs.insert("c".into(), Tensor::uniform(out, -1.0, 1.0, rng));
    Case {
        graph: g,
        loss,
        params,
        inputs,
        mode,
    }
}

/// Every differentiable primitive paired with a finite-difference result:
/// `(name, max relative error)`.
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let w = (-1.5, 1.5);
    let pos = (0.5, 2.0);
    let m23: &[usize] = &[2, 3];
    let cases: Vec<(&'static str, Case)> = vec![
        ("add", case(r, &[("x", m23, w.0, w.1), ("y", m23, w.0, w.1)], m23, Mode::Eval, |g, v| g.add(v[0], v[1]))),
        ("sub", case(r, &[("x", m23, w.0, w.1), ("y", m23, w.0, w.1)], m23, Mode::Eval, |g, v| g.sub(v[0], v[1]))),
        ("mul", case(r, &[("x", m23, w.0, w.1), ("y", m23, w.0, w.1)], m23, Mode::Eval, |g, v| g.mul(v[0], v[1]))),
        ("scale", case(r, &[("x", m23, w.0, w.1)], m23, Mode::Eval, |g, v| g.scale(v[0], -1.7))),
        (
            "matmul",
            case(r, &[("a", &[2, 3, 4], w.0, w.1), ("b", &[4, 2], w.0, w.1)], &[2, 3, 2], Mode::Eval, |g, v| {
                g.matmul(v[0], v[1])
            }),
        ),
        (
            "batched_matmul",
            case(r, &[("a", &[2, 3, 4], w.0, w.1), ("b", &[2, 4, 2], w.0, w.1)], &[2, 3, 2], Mode::Eval, |g, v| {
                g.matmul(v[0], v[1])
            }),
        ),
        ("transpose", case(r, &[("x", &[2, 3, 4], w.0, w.1)], &[2, 4, 3], Mode::Eval, |g, v| g.transpose(v[0]))),
        (
            "permute",
            case(r, &[("x", &[2, 3, 4], w.0, w.1)], &[4, 2, 3], Mode::Eval, |g, v| g.permute(v[0], &[2, 0, 1])),
        ),
        ("reshape", case(r, &[("x", &[2, 3, 4], w.0, w.1)], &[6, 4], Mode::Eval, |g, v| g.reshape(v[0], &[6, 4]))),
        (
            "concat",
            case(r, &[("x", m23, w.0, w.1), ("y", &[2, 2], w.0, w.1)], &[2, 5], Mode::Eval, |g, v| {
                g.concat(&[v[0], v[1]], 1)
            }),
        ),
        ("slice", case(r, &[("x", &[2, 4], w.0, w.1)], &[2, 2], Mode::Eval, |g, v| g.slice(v[0], 1, 1, 3))),
        ("sum", case(r, &[("x", &[2, 3, 4], w.0, w.1)], &[2, 4], Mode::Eval, |g, v| g.sum(v[0], 1))),
        ("mean", case(r, &[("x", &[2, 3, 4], w.0, w.1)], &[3, 4], Mode::Eval, |g, v| g.mean(v[0], 0))),
        (
            "broadcast",
            case(r, &[("x", &[1, 3], w.0, w.1)], &[2, 4, 3], Mode::Eval, |g, v| g.broadcast(v[0], &[2, 4, 3])),
        ),
        ("exp", case(r, &[("x", m23, w.0, w.1)], m23, Mode::Eval, |g, v| g.exp(v[0]))),
        ("log", case(r, &[("x", m23, pos.0, pos.1)], m23, Mode::Eval, |g, v| g.log(v[0]))),
        ("sqrt", case(r, &[("x", m23, pos.0, pos.1)], m23, Mode::Eval, |g, v| g.sqrt(v[0]))),
        ("square", case(r, &[("x", m23, w.0, w.1)], m23, Mode::Eval, |g, v| g.square(v[0]))),
        ("softplus", case(r, &[("x", m23, -4.0, 4.0)], m23, Mode::Eval, |g, v| g.softplus(v[0]))),
        ("gelu", case(r, &[("x", m23, -3.0, 3.0)], m23, Mode::Eval, |g, v| g.gelu(v[0]))),
        ("softmax", case(r, &[("x", &[3, 4], -3.0, 3.0)], &[3, 4], Mode::Eval, |g, v| g.softmax(v[0], 1))),
        (
            "layer_norm",
            case(
                r,
                &[("x", &[3, 5], -2.0, 2.0), ("gain", &[5], 0.5, 1.5), ("bias", &[5], w.0, w.1)],
                &[3, 5],
                Mode::Eval,
                |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
            ),
        ),
        (
            "dropout",
            case(r, &[("x", &[4, 5], w.0, w.1)], &[4, 5], Mode::Train { seed: seed ^ 0xD20 }, |g, v| {
                g.dropout(v[0], 0.3)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, c)| {
            let r = gradcheck::check(&c.graph, c.loss, &c.params, &c.inputs, c.mode, 1e-6, None)?;
            Ok((name, r.max_rel_err))
        })
        .collect()
}

fn random_net(n: usize, d: usize, seed: u64) -> Result<BiasNetwork> {
    let mut net = BiasNetwork::new(
        NetConfig {
            d,
            n,
            width: 8,
            layers: 1,
            heads: 2,
            ff: 16,
            dropout: 0.0,
            velocity_conditioning: true,
            md_mode: false,
        },
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11CE);
    for t in net.params_mut().values_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.7..0.7));
    }
    Ok(net)
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<(SystemState, TargetSpec)> {
    let mut draw = |k: usize, s: f64| (0..k).map(|_| rng.random_range(-s..s)).collect::<Vec<f64>>();
    let s = SystemState::new(n, d, draw(n * d, 1.5), draw(n * d, 0.5))?;
    let t = TargetSpec::new(n, d, draw(n * d, 1.5), 0.3)?;
    Ok((s, t))
}

/// Finite-difference check of the full bias network, entries sampled.
pub fn network_gradcheck(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_net(3, 2, seed)?;
    let systems = (0..2).map(|_| random_problem(&mut rng, 3, 2)).collect::<Result<Vec<_>>>()?;
    let items: Vec<_> = systems.iter().map(|(s, t)| (s, t)).collect();
    let f = net.features(&items)?;
    let mut g = Graph::new();
    let b = net.bias_graph(&mut g, f.sets, f.n);
    let c = g.input("c");
    let y = g.mul(b, c);
    let loss = g.sum_all(y, f.sets * f.n * f.d);
    let mut inputs = ParamSet::new();
    inputs.insert("tokens".into(), f.tokens);
    inputs.insert("s_hat".into(), f.s_hat);
    inputs.insert("defined".into(), f.defined);
    inputs.insert("c".into(), Tensor::uniform(&[2, 3, 2], -1.0, 1.0, &mut rng));
    Ok(gradcheck::check(&g, loss, net.params(), &inputs, Mode::Eval, 1e-5, Some((4, seed)))?.max_rel_err)
}

fn dynamics(mode: Integrator) -> DynamicsParams {
    DynamicsParams {
        mode,
        gamma: 1.5,
        tau_start: 0.4,
        tau_end: 0.2,
        k_b: 1.0,
        masses: vec![1.0, 2.0],
        dt: 0.01,
        steps: 5,
    }
}

/// Worst deviations, over `cases` random short rollouts, of the Girsanov sum
/// from the log-density difference and of `F + r` from the log ratio of
/// independently computed Gaussian path densities.
pub fn girsanov_check(cases: usize, seed: u64) -> Result<(f64, f64)> {
    let pot = PotentialSpec::Toy(ToyPotential::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum_err, mut identity_err) = (0.0f64, 0.0f64);
    for c in 0..cases {
        let mode = if c % 2 == 0 { Integrator::Overdamped } else { Integrator::Underdamped };
        let p = dynamics(mode);
        let behavior = random_net(2, 2, seed.wrapping_add(2 * c as u64))?;
        let current = random_net(2, 2, seed.wrapping_add(2 * c as u64 + 1))?;
        let (s, t) = random_problem(&mut rng, 2, 2)?;
        let tr = rollout(&behavior, &s, &t, &p, &pot, rng.random())?;
        sum_err = sum_err.max(((tr.log_pb - tr.log_p0) - tr.girsanov_sum()).abs());
        let items: Vec<_> = tr.states[..tr.steps()].iter().map(|x| (x, &tr.target)).collect();
        let b: Vec<f64> = current.compute_bias_batch(&items)?.into_iter().flat_map(|o| o.b).collect();
        let lhs = f_hat(&tr, &b)? + tr.reward;
        let rhs = tr.log_density_under(&vec![0.0; b.len()], &p, &pot)? + tr.reward - tr.log_density_under(&b, &p, &pot)?;
        identity_err = identity_err.max((lhs - rhs).abs());
    }
    Ok((sum_err, identity_err))
}

/// Over random networks and systems: cone violations `<b_i, s_i> < 0` and the
/// worst residual of the orthogonal-projection identity.
pub fn cone_check(draws: usize, seed: u64) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    let per_net = 100;
    for block in 0..draws.div_ceil(per_net) {
        let d = 2 + block % 2;
        let n = 1 + block % 4;
        let net = random_net(n, d, seed.wrapping_add(block as u64))?;
        let count = per_net.min(draws - block * per_net);
        let systems = (0..count).map(|_| random_problem(&mut rng, n, d)).collect::<Result<Vec<_>>>()?;
        let items: Vec<_> = systems.iter().map(|(s, t)| (s, t)).collect();
        for out in net.compute_bias_batch(&items)? {
            for i in 0..n {
                let b = &out.b[i * d..(i + 1) * d];
                let s = &out.s_hat[i * d..(i + 1) * d];
                let h = &out.h[i * d..(i + 1) * d];
                let bs: f64 = b.iter().zip(s).map(|(x, y)| x * y).sum();
                if bs < 0.0 {
                    violations += 1;
                }
                // b - alpha s must equal the projection of h off s
                let hs: f64 = h.iter().zip(s).map(|(x, y)| x * y).sum();
                for j in 0..d {
                    let expect = out.alpha[i] * s[j] + h[j] - hs * s[j];
                    worst = worst.max((b[j] - expect).abs());
                }
            }
        }
    }
    Ok((violations, worst))
}

/// Synthetic draws of `(alpha_raw, h, s, rho, m)` with a step within the
/// admissible bound; returns how many steps moved away from the target point.
pub fn step_bound_check(draws: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut increases = 0;
    for _ in 0..draws {
        let d = 3;
        let s: Vec<f64> = loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                break v.iter().map(|x| x / norm).collect();
            }
        };
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut b = vec![0.0; d];
        let alpha = assemble(rng.random_range(-4.0..4.0), &h, Some(&s), &mut b);
        let rho = rng.random_range(0.01..5.0);
        let m = rng.random_range(0.1..10.0);
        let bb: f64 = b.iter().map(|x| x * x).sum();
        let dt = rng.random_range(0.0..=1.0) * 2.0 * m * alpha * rho / bb;
        let after = (0..d).map(|j| (b[j] / m * dt - rho * s[j]).powi(2)).sum::<f64>().sqrt();
        if after > rho * (1.0 + 1e-12) {
            increases += 1;
        }
    }
    increases
}

fn brute_force_assignment(cost: &[f64], m: usize) -> f64 {
    fn go(row: usize, m: usize, cost: &[f64], used: &mut [bool], acc: f64, best: &mut f64) {
        if row == m {
            *best = best.min(acc);
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                go(row + 1, m, cost, used, acc + cost[row * m + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, m, cost, &mut vec![false; m], 0.0, &mut best);
    best
}

/// Counts of oracle disagreements: exact assignment vs enumeration, nonzero
/// `MMD(X, X)`, asymmetric MMD, and `W1 > W2`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OracleFailures {
    pub assignment: usize,
    pub mmd_self: usize,
    pub mmd_symmetry: usize,
    pub w_order: usize,
}

impl OracleFailures {
    pub fn total(&self) -> usize {
        self.assignment + self.mmd_self + self.mmd_symmetry + self.w_order
    }
}

pub fn metric_oracle_check(cases: usize, seed: u64) -> Result<OracleFailures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bw = MetricsConfig::default().mmd_bandwidths;
    let mut f = OracleFailures::default();
    for c in 0..cases {
        let m = 1 + c % 7;
        let cost: Vec<f64> = (0..m * m).map(|_| rng.random_range(0.0..10.0)).collect();
        let got = assignment_cost(&cost, m, &hungarian(&cost, m));
        if (got - brute_force_assignment(&cost, m)).abs() > 1e-9 {
            f.assignment += 1;
        }
        let dim = 1 + c % 3;
        let count = 1 + c % 10;
        let x: Vec<f64> = (0..count * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..count * dim).map(|_| rng.random_range(-2.0..4.0)).collect();
        let (xs, ys) = (Samples::new(&x, dim)?, Samples::new(&y, dim)?);
        if rbf_mmd(xs, xs, &bw)?.abs() > 1e-12 {
            f.mmd_self += 1;
        }
        if (rbf_mmd(xs, ys, &bw)? - rbf_mmd(ys, xs, &bw)?).abs() > 1e-12 {
            f.mmd_symmetry += 1;
        }
        if wasserstein(xs, ys, Order::W1, None)? > wasserstein(xs, ys, Order::W2, None)? + 1e-9 {
            f.w_order += 1;
        }
    }
    Ok(f)
}

/// Loads a network checkpoint and checks its bias on random systems is
/// finite and inside the cone.
pub fn checkpoint_check(path: &Path, seed: u64) -> Result<()> {
    let net = BiasNetwork::load(path)?;
    let (n, d) = (net.config().n, net.config().d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let systems = (0..8).map(|_| random_problem(&mut rng, n, d)).collect::<Result<Vec<_>>>()?;
    let items: Vec<_> = systems.iter().map(|(s, t)| (s, t)).collect();
    for out in net.compute_bias_batch(&items)? {
        for i in 0..n {
            let dot: f64 = (0..d).map(|j| out.b[i * d + j] * out.s_hat[i * d + j]).sum();
            if !(dot >= 0.0) {
                return Err(crate::Error::NonFiniteBias { particle: i });
            }
        }
    }
    Ok(())
}

fn report(name: &'static str, outcome: Result<(bool, String)>) -> SuiteReport {
    match outcome {
        Ok((passed, detail)) => SuiteReport { name, passed, detail },
        Err(e) => SuiteReport {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Runs every suite with `seeds` repetitions of the seeded checks; adds a
/// checkpoint suite when a path is given.
pub fn run_all(seeds: u64, checkpoint: Option<&Path>) -> Vec<SuiteReport> {
    let mut out = Vec::new();
    out.push(report("gradcheck", (|| {
        let mut worst: (f64, &str) = (0.0, "");
        for s in 0..seeds {
            for (name, e) in primitive_gradchecks(s)? {
                if e > worst.0 {
                    worst = (e, name);
                }
            }
            let e = network_gradcheck(s)?;
            if e > worst.0 {
                worst = (e, "network");
            }
        }
        Ok((worst.0 < GRAD_TOL, format!("max rel err {:.2e} ({})", worst.0, worst.1)))
    })()));
    out.push(report("girsanov", (|| {
        let (a, b) = girsanov_check(20 * seeds as usize, 1)?;
        Ok((a < DENSITY_TOL && b < DENSITY_TOL, format!("girsanov {a:.2e}, path identity {b:.2e}")))
    })()));
    out.push(report("positivity", (|| {
        let (v, r) = cone_check(100 * seeds as usize, 2)?;
        let inc = step_bound_check(100 * seeds as usize, 3);
        Ok((v == 0 && r < 1e-12 && inc == 0, format!("{v} cone violations, projection residual {r:.1e}, {inc} distance increases")))
    })()));
    out.push(report("metric-oracles", (|| {
        let f = metric_oracle_check(100 * seeds as usize, 4)?;
        Ok((f.total() == 0, format!("{f:?}")))
    })()));
    if let Some(p) = checkpoint {
        out.push(report("checkpoint", checkpoint_check(p, 5).map(|()| (true, p.display().to_string()))));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_run_passes() {
        let reports = run_all(1, None);
        assert_eq!(reports.len(), 4);
        for r in reports {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn missing_checkpoint_fails() {
        let r = run_all(1, Some(Path::new("/nonexistent/net.bin")));
        assert!(!r.last().unwrap().passed);
    }
}
