//! Rollout and training loop, and inference with a trained bias.

mod config;

pub use config::TrainConfig;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::adam::clip_global_norm;
use crate::autodiff::{AdamState, Mode, ParamSet, Tensor};
use crate::biasnet::{BiasNetwork, Frame, TargetSpec};
use crate::buffer::ReplayBuffer;
use crate::dynamics::{rollout_batch, DynamicsParams, Integrator, SystemState, Trajectory};
use crate::energy::{PotentialSpec, RbfManifold, ToyPotential};
use crate::error::{Error, Result};
use crate::io::{read_points_csv, PointCloud};
use crate::metrics::hungarian;
use crate::objective::{loss_and_gradients, LvState, Objective, LV_PARAM};

/// File name of the checkpoint refreshed after every rollout.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CURVES_FILE: &str = "curves.csv";

/// Where initial states or targets come from.
#[derive(Debug, Clone)]
pub enum StateSource {
    /// One fixed `n x d` configuration.
    Fixed(Vec<f64>),
    /// Nearest-neighbor clusters of `n` points drawn from a cloud.
    Cloud(Arc<PointCloud>),
}

impl StateSource {
    fn check(&self, n: usize, d: usize, what: &str) -> Result<()> {
        match self {
            Self::Fixed(x) if x.len() != n * d => Err(Error::Config(format!(
                "{what} point has {} coordinates, need n * d = {}",
                x.len(),
                n * d
            ))),
            Self::Cloud(c) if c.dim != d => Err(Error::Config(format!(
                "{what} cloud has {} columns, need d = {d}",
                c.dim
            ))),
            Self::Cloud(c) if c.len() < n => Err(Error::Config(format!(
                "{what} cloud has {} points, fewer than n = {n}",
                c.len()
            ))),
            _ => Ok(()),
        }
    }

    fn parse(spec: &str) -> Result<Self> {
        if let Some(list) = spec.strip_prefix("point:") {
            let coords = list
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("bad point `{spec}`")))?;
            return Ok(Self::Fixed(coords));
        }
        Ok(Self::Cloud(Arc::new(read_points_csv(Path::new(spec))?)))
    }
}

/// The `n` points nearest to a uniformly drawn anchor, nearest first.
pub fn nearest_cluster<R: Rng + ?Sized>(cloud: &PointCloud, n: usize, rng: &mut R) -> Vec<f64> {
    let anchor = cloud.row(rng.random_range(0..cloud.len())).to_vec();
    let mut order: Vec<(f64, usize)> = (0..cloud.len())
        .map(|i| {
            let d2: f64 = cloud.row(i).iter().zip(&anchor).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order[..n].iter().flat_map(|&(_, i)| cloud.row(i).to_vec()).collect()
}

/// Reorders the rows of `target` so particle `i` of `source` is paired with
/// the row that minimizes the total squared displacement.
pub fn pair_particles(source: &[f64], target: &[f64], d: usize) -> Vec<f64> {
    let n = source.len() / d;
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = (0..d).map(|a| (source[i * d + a] - target[j * d + a]).powi(2)).sum();
        }
    }
    hungarian(&cost, n)
        .into_iter()
        .flat_map(|j| target[j * d..(j + 1) * d].to_vec())
        .collect()
}

/// Potential and the initial and target distributions of a task.
#[derive(Debug, Clone)]
pub struct Problem {
    pub potential: PotentialSpec,
    pub initial: StateSource,
    pub target: StateSource,
}

impl Problem {
    /// Resolves the `potential`, `initial` and `target` references of a config.
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let problem = Self {
            potential: parse_potential(&cfg.potential)?,
            initial: StateSource::parse(&cfg.initial)?,
            target: StateSource::parse(&cfg.target)?,
        };
        problem.check(cfg)?;
        Ok(problem)
    }

    pub fn check(&self, cfg: &TrainConfig) -> Result<()> {
        if let Some(dim) = self.potential.dim() {
            if dim != cfg.d {
                return Err(Error::Config(format!("potential is {dim}-dimensional but d = {}", cfg.d)));
            }
        }
        self.initial.check(cfg.n, cfg.d, "initial")?;
        self.target.check(cfg.n, cfg.d, "target")
    }

    /// Draws `count` (initial state, target, seed) triples.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        cfg: &TrainConfig,
        params: &DynamicsParams,
        count: usize,
        rng: &mut R,
    ) -> Result<(Vec<SystemState>, Vec<TargetSpec>, Vec<u64>)> {
        let (n, d) = (cfg.n, cfg.d);
        let mut init = Vec::with_capacity(count);
        let mut tgts = Vec::with_capacity(count);
        let mut seeds = Vec::with_capacity(count);
        for _ in 0..count {
            let r0 = match &self.initial {
                StateSource::Fixed(x) => x.clone(),
                StateSource::Cloud(c) => nearest_cluster(c, n, rng),
            };
            let rb = match &self.target {
                StateSource::Fixed(x) => x.clone(),
                StateSource::Cloud(c) => {
                    let t = nearest_cluster(c, n, rng);
                    pair_particles(&r0, &t, d)
                }
            };
            let v0 = match params.mode {
                Integrator::Overdamped => vec![0.0; n * d],
                Integrator::Underdamped => {
                    let mut sub = ChaCha8Rng::seed_from_u64(rng.next_u64());
                    params.maxwell_boltzmann(n, d, &mut sub)
                }
            };
            init.push(SystemState::new(n, d, r0, v0)?);
            tgts.push(TargetSpec::new(n, d, rb, cfg.sigma)?);
            seeds.push(rng.next_u64());
        }
        Ok((init, tgts, seeds))
    }
}

/// Parses the `potential` config value.
pub fn parse_potential(spec: &str) -> Result<PotentialSpec> {
    match spec {
        "double_well" => return Ok(ToyPotential::default().into()),
        "muller_brown" => return Ok(ToyPotential::MullerBrown.into()),
        _ => {}
    }
    if let Some(ab) = spec.strip_prefix("double_well:") {
        let v: Vec<f64> = ab
            .split(',')
            .map(|x| x.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad potential `{spec}`")))?;
        if let [a, b] = v[..] {
            return Ok(ToyPotential::DoubleWell { a, b }.into());
        }
        return Err(Error::Config(format!("`{spec}` needs two parameters")));
    }
    let tensors = crate::autodiff::checkpoint::load(Path::new(spec))?;
    Ok(RbfManifold::from_tensors(&tensors)?.into())
}

/// Per-rollout statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub rollout: usize,
    /// Mean training loss over the rollout's gradient steps.
    pub loss: f64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: Vec<f64>,
    pub mean_reward: Vec<f64>,
    pub wall_time_s: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// `rollout,loss,mean_reward` rows.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("rollout,loss,mean_reward\n");
        for (i, (l, r)) in self.loss.iter().zip(&self.mean_reward).enumerate() {
            out.push_str(&format!("{i},{l},{r}\n"));
        }
        out
    }
}

/// Training state advanced one rollout at a time.
pub struct Trainer {
    cfg: TrainConfig,
    problem: Problem,
    params: DynamicsParams,
    net: BiasNetwork,
    adam: AdamState,
    lv: LvState,
    lv_adam: AdamState,
    lv_ready: bool,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    rollouts: usize,
    report: TrainReport,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, problem: Problem) -> Result<Self> {
        cfg.validate()?;
        problem.check(&cfg)?;
        let mut net = BiasNetwork::new(cfg.net_config(), cfg.seed)?;
        if cfg.md_mode {
            match &problem.target {
                StateSource::Fixed(x) => net.set_frame(Frame {
                    reference: x.clone(),
                    mask: None,
                })?,
                StateSource::Cloud(_) => {
                    return Err(Error::Config("md_mode needs a fixed target structure".into()));
                }
            }
        }
        Ok(Self {
            params: cfg.dynamics(),
            adam: AdamState::new(cfg.lr),
            lv: LvState { w: 0.0 },
            lv_adam: AdamState::new(cfg.lv_lr),
            lv_ready: false,
            buffer: ReplayBuffer::new(cfg.buffer_capacity)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0FB0_FFE5),
            rollouts: 0,
            report: TrainReport::default(),
            net,
            cfg,
            problem,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn network(&self) -> &BiasNetwork {
        &self.net
    }

    pub fn into_network(self) -> BiasNetwork {
        self.net
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn rollouts_done(&self) -> usize {
        self.rollouts
    }

    /// Simulates one batch under a frozen snapshot of the current parameters
    /// and stores it.
    pub fn collect(&mut self) -> Result<f64> {
        let (init, tgts, seeds) = self.problem.sample(&self.cfg, &self.params, self.cfg.samples, &mut self.rng)?;
        let snapshot = self.net.clone();
        let trajs = rollout_batch(&snapshot, &init, &tgts, &self.params, &self.problem.potential, &seeds)?;
        let mean_reward = trajs.iter().map(|t| t.reward).sum::<f64>() / trajs.len() as f64;
        for t in trajs {
            self.buffer.push(t)?;
        }
        Ok(mean_reward)
    }

    /// One optimizer step on a batch drawn from the buffer. A non-finite loss
    /// leaves the parameters untouched.
    pub fn gradient_step(&mut self, epoch: usize) -> Result<f64> {
        let batch: Vec<&Trajectory> = self
            .buffer
            .sample(self.cfg.batch_size, &mut self.rng)?
            .into_iter()
            .map(|e| &e.trajectory)
            .collect();
        let mode = if self.cfg.dropout > 0.0 {
            Mode::Train { seed: self.rng.next_u64() }
        } else {
            Mode::Eval
        };
        let objective = self.cfg.objective;
        if objective == Objective::Lv && !self.lv_ready {
            // start the offset at the batch mean of F + r: dL/dw = 2 (w - mean)
            let probe = loss_and_gradients(&self.net, &batch, objective, LvState { w: 0.0 }, mode, self.cfg.chunk)?;
            self.lv.w = -0.5 * probe.grads[LV_PARAM].item();
            self.lv_ready = true;
        }
        let out = loss_and_gradients(&self.net, &batch, objective, self.lv, mode, self.cfg.chunk)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                rollout: self.rollouts,
                epoch,
            });
        }
        let mut grads = out.grads;
        let lv_grad = grads.remove(LV_PARAM);
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        self.adam.step(self.net.params_mut(), &grads)?;
        if let Some(g) = lv_grad {
            let mut p = ParamSet::new();
            p.insert(LV_PARAM.into(), Tensor::scalar(self.lv.w));
            self.lv_adam.step(&mut p, &[(LV_PARAM.to_string(), g)].into_iter().collect())?;
            self.lv.w = p[LV_PARAM].item();
        }
        Ok(out.loss)
    }

    /// Collection followed by `n_epochs` gradient steps.
    pub fn run_rollout(&mut self) -> Result<RolloutStats> {
        let index = self.rollouts;
        let wrap = |e: Error| Error::Rollout {
            index,
            source: Box::new(e),
        };
        let mean_reward = self.collect().map_err(wrap)?;
        let mut total = 0.0;
        for epoch in 0..self.cfg.n_epochs {
            total += self.gradient_step(epoch).map_err(wrap)?;
        }
        let loss = if self.cfg.n_epochs > 0 {
            total / self.cfg.n_epochs as f64
        } else {
            0.0
        };
        self.rollouts += 1;
        self.report.loss.push(loss);
        self.report.mean_reward.push(mean_reward);
        Ok(RolloutStats {
            rollout: index,
            loss,
            mean_reward,
        })
    }
}

/// Runs `n_rollouts` rollouts. With `out_dir`, the checkpoint and the loss
/// curves are rewritten after every rollout (and once before training).
pub fn train(
    cfg: &TrainConfig,
    problem: &Problem,
    out_dir: Option<&Path>,
    mut on_rollout: impl FnMut(&RolloutStats),
) -> Result<(BiasNetwork, TrainReport)> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone(), problem.clone())?;
    let save = |t: &Trainer| -> Result<Option<PathBuf>> {
        let Some(dir) = out_dir else { return Ok(None) };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CHECKPOINT_FILE);
        t.network().save(&path)?;
        std::fs::write(dir.join(CURVES_FILE), t.report().curves_csv())?;
        Ok(Some(path))
    };
    let mut checkpoint = save(&trainer)?;
    for _ in 0..cfg.n_rollouts {
        let stats = trainer.run_rollout()?;
        checkpoint = save(&trainer)?;
        on_rollout(&stats);
    }
    let mut report = trainer.report().clone();
    report.wall_time_s = start.elapsed().as_secs_f64();
    report.checkpoint = checkpoint;
    Ok((trainer.into_network(), report))
}

/// Rolls out `count` fresh problems under a trained bias without updating
/// it. Targets may come from a distribution never seen in training.
pub fn infer(net: &BiasNetwork, cfg: &TrainConfig, problem: &Problem, count: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let nc = net.config();
    if nc.d != cfg.d || nc.velocity_conditioning != cfg.velocity_conditioning || nc.md_mode != cfg.md_mode {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects d = {} (token width {}), config has d = {}",
            nc.d,
            nc.token_dim(),
            cfg.d
        )));
    }
    problem.check(cfg)?;
    let params = cfg.dynamics();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (init, tgts, seeds) = problem.sample(cfg, &params, count, &mut rng)?;
    rollout_batch(net, &init, &tgts, &params, &problem.potential, &seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_cluster_contains_anchor_neighborhood() {
        let cloud = PointCloud {
            dim: 1,
            data: vec![0.0, 10.0, 0.5, 10.5, 1.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = nearest_cluster(&cloud, 2, &mut rng);
            assert!((c[0] - c[1]).abs() <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn pairing_minimizes_displacement() {
        let src = [0.0, 0.0, 5.0, 0.0];
        let tgt = [5.0, 1.0, 0.0, 1.0];
        assert_eq!(pair_particles(&src, &tgt, 2), vec![0.0, 1.0, 5.0, 1.0]);
    }

    #[test]
    fn potential_specs() {
        assert!(parse_potential("double_well").is_ok());
        assert!(parse_potential("double_well:2,0.5").is_ok());
        assert!(parse_potential("double_well:2").is_err());
        assert!(parse_potential("/nonexistent/manifold.bin").is_err());
    }
}
