//! Controlled Langevin dynamics and path log-densities.

mod csv;
mod state;

pub use csv::{read_trajectory_csv, write_endpoints_csv, write_trajectory_csv};
pub use state::SystemState;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biasnet::{BiasNetwork, TargetSpec};
use crate::energy::PotentialSpec;
use crate::error::{Error, Result};
use crate::objective::terminal_reward;

/// Trajectories per batched network call during a rollout. Fixed so results
/// do not depend on the worker count.
const ROLLOUT_GROUP: usize = 8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    /// First order: positions carry the noise.
    Overdamped,
    /// Second order: velocities carry the noise, positions follow.
    Underdamped,
}

impl std::str::FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overdamped" => Ok(Self::Overdamped),
            "underdamped" => Ok(Self::Underdamped),
            _ => Err(Error::Config(format!("unknown dynamics mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for Integrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Overdamped => "overdamped",
            Self::Underdamped => "underdamped",
        })
    }
}

/// Friction, temperatures, masses and discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsParams {
    pub mode: Integrator,
    pub gamma: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub k_b: f64,
    /// One mass per particle, or a single shared mass.
    pub masses: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if !(self.gamma > 0.0) {
            return bad("gamma");
        }
        if !(self.dt > 0.0) {
            return bad("dt");
        }
        if self.steps == 0 {
            return bad("K");
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return bad("temperatures");
        }
        if !(self.k_b > 0.0) {
            return bad("k_B");
        }
        if self.masses.is_empty() || self.masses.iter().any(|&m| !(m > 0.0)) {
            return bad("masses");
        }
        Ok(())
    }

    pub fn mass(&self, i: usize) -> f64 {
        if self.masses.len() == 1 {
            self.masses[0]
        } else {
            self.masses[i]
        }
    }

    /// Linear annealing: `tau_0 = tau_start`, `tau_{K-1} = tau_end`.
    pub fn tau(&self, k: usize) -> f64 {
        if self.steps <= 1 {
            return self.tau_start;
        }
        let frac = k as f64 / (self.steps - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * frac
    }

    /// Diffusion scale of particle `i` at step `k`.
    pub fn sigma(&self, k: usize, i: usize) -> f64 {
        let kt = self.k_b * self.tau(k);
        match self.mode {
            Integrator::Overdamped => (2.0 * kt / self.gamma).sqrt(),
            Integrator::Underdamped => (2.0 * self.gamma * kt / self.mass(i)).sqrt(),
        }
    }

    /// Deterministic force term: `-grad U / gamma` (overdamped) or
    /// `-grad U / m_i` (underdamped).
    pub fn drift(&self, potential: &PotentialSpec, r: &[f64], d: usize) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; r.len()];
        potential.system_energy_grad(r, d, &mut grad)?;
        for (i, g) in grad.chunks_exact_mut(d).enumerate() {
            let scale = match self.mode {
                Integrator::Overdamped => self.gamma,
                Integrator::Underdamped => self.mass(i),
            };
            g.iter_mut().for_each(|x| *x = -*x / scale);
        }
        Ok(grad)
    }

    /// Velocities drawn from the Maxwell-Boltzmann law at `tau_start`.
    pub fn maxwell_boltzmann(&self, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n * d)
            .map(|j| {
                let z: f64 = StandardNormal.sample(rng);
                z * (self.k_b * self.tau_start / self.mass(j / d)).sqrt()
            })
            .collect()
    }
}

/// Anything that maps systems to controls `u` (entering as `Sigma u`).
pub trait Controller: Sync {
    fn controls(&self, items: &[(&SystemState, &TargetSpec)]) -> Result<Vec<Vec<f64>>>;
}

/// The base measure: no control at all.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroControl;

impl Controller for ZeroControl {
    fn controls(&self, items: &[(&SystemState, &TargetSpec)]) -> Result<Vec<Vec<f64>>> {
        Ok(items.iter().map(|(s, _)| vec![0.0; s.n * s.d]).collect())
    }
}

impl Controller for BiasNetwork {
    fn controls(&self, items: &[(&SystemState, &TargetSpec)]) -> Result<Vec<Vec<f64>>> {
        Ok(self.compute_bias_batch(items)?.into_iter().map(|o| o.b).collect())
    }
}

/// A closure evaluated one system at a time.
pub struct FnControl<F>(pub F);

impl<F> Controller for FnControl<F>
where
    F: Fn(&SystemState, &TargetSpec) -> Vec<f64> + Sync,
{
    fn controls(&self, items: &[(&SystemState, &TargetSpec)]) -> Result<Vec<Vec<f64>>> {
        Ok(items.iter().map(|(s, t)| (self.0)(s, t)).collect())
    }
}

/// One Euler-Maruyama step with the Brownian increment `dw` supplied.
pub fn step_with_noise(
    state: &SystemState,
    drift: &[f64],
    control: &[f64],
    params: &DynamicsParams,
    k: usize,
    dw: &[f64],
) -> Result<SystemState> {
    let (n, d) = (state.n, state.d);
    if drift.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteForce { step: k });
    }
    if [drift.len(), control.len(), dw.len()].iter().any(|&l| l != n * d) {
        return Err(Error::Invalid(format!("step {k}: force, control and noise must have {} entries", n * d)));
    }
    let dt = params.dt;
    let mut next = state.clone();
    next.t_index = state.t_index + 1;
    for i in 0..n {
        let sig = params.sigma(k, i);
        for a in 0..d {
            let j = i * d + a;
            match params.mode {
                Integrator::Overdamped => {
                    next.r[j] = state.r[j] + (drift[j] + sig * control[j]) * dt + sig * dw[j];
                }
                Integrator::Underdamped => {
                    let v = state.v[j];
                    let v_next = v + (drift[j] - params.gamma * v + sig * control[j]) * dt + sig * dw[j];
                    next.v[j] = v_next;
                    next.r[j] = state.r[j] + v_next * dt;
                }
            }
        }
    }
    if next.r.iter().chain(&next.v).any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteForce { step: k });
    }
    Ok(next)
}

/// Draws `dw ~ N(0, dt)` from `rng` and steps.
pub fn step(
    state: &SystemState,
    drift: &[f64],
    control: &[f64],
    params: &DynamicsParams,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(SystemState, Vec<f64>)> {
    let dw = brownian(state.n * state.d, params.dt, rng);
    let next = step_with_noise(state, drift, control, params, k, &dw)?;
    Ok((next, dw))
}

fn brownian(len: usize, dt: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = dt.sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * s
        })
        .collect()
}

/// `log N(x_next | x + drift dt, diag(sigma^2) dt)` including normalization.
/// `sigma` holds one scale per coordinate.
pub fn transition_logdensity(x: &[f64], x_next: &[f64], drift: &[f64], sigma: &[f64], dt: f64) -> Result<f64> {
    if [x_next.len(), drift.len(), sigma.len()].iter().any(|&l| l != x.len()) {
        return Err(Error::Invalid("transition density arguments differ in length".into()));
    }
    let mut total = 0.0;
    for j in 0..x.len() {
        let s = sigma[j];
        if !(s > 0.0) {
            return Err(Error::Invalid(format!("diffusion scale must be positive, got {s}")));
        }
        let var = s * s * dt;
        let z = x_next[j] - x[j] - drift[j] * dt;
        total += -0.5 * (LN_2PI + var.ln()) - z * z / (2.0 * var);
    }
    Ok(total)
}

/// A discrete path with everything the objectives need.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n: usize,
    pub d: usize,
    pub mode: Integrator,
    pub dt: f64,
    /// `K + 1` states.
    pub states: Vec<SystemState>,
    /// `K x n x d` Brownian increments.
    pub noise: Vec<f64>,
    /// `K x n x d` behavior controls.
    pub behavior_bias: Vec<f64>,
    /// `K x n` diffusion scales.
    pub sigma: Vec<f64>,
    pub log_p0: f64,
    pub log_pb: f64,
    pub reward: f64,
    pub target: TargetSpec,
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn block(&self, data: &[f64], k: usize) -> std::ops::Range<usize> {
        let m = self.n * self.d;
        debug_assert_eq!(data.len(), self.steps() * m);
        k * m..(k + 1) * m
    }

    pub fn final_state(&self) -> &SystemState {
        self.states.last().expect("trajectory has states")
    }

    /// Sanity checks applied before a path enters the replay buffer.
    pub fn validate(&self) -> Result<()> {
        let k = self.steps();
        let m = self.n * self.d;
        if k == 0
            || self.noise.len() != k * m
            || self.behavior_bias.len() != k * m
            || self.sigma.len() != k * self.n
        {
            return Err(Error::Invalid("trajectory arrays disagree with K, n, d".into()));
        }
        if ![self.log_p0, self.log_pb, self.reward].iter().all(|x| x.is_finite()) {
            return Err(Error::Invalid("trajectory log densities or reward not finite".into()));
        }
        for s in &self.states {
            s.validate()?;
        }
        Ok(())
    }

    /// Sum over steps of `bbar . dW + 1/2 |bbar|^2 dt`.
    pub fn girsanov_sum(&self) -> f64 {
        self.behavior_bias
            .iter()
            .zip(&self.noise)
            .map(|(b, w)| b * w + 0.5 * b * b * self.dt)
            .sum()
    }

    fn coordinate_sigma(&self, k: usize) -> Vec<f64> {
        (0..self.n * self.d).map(|j| self.sigma[k * self.n + j / self.d]).collect()
    }

    /// Log-density of the stored path under the drift `f + Sigma u`, with `u`
    /// given per step (`K x n x d`) and `f` recomputed from the potential.
    pub fn log_density_under(&self, controls: &[f64], params: &DynamicsParams, potential: &PotentialSpec) -> Result<f64> {
        let mut total = 0.0;
        for k in 0..self.steps() {
            let sig = self.coordinate_sigma(k);
            let mean = self.mean_drift(k, &controls[self.block(controls, k)], &sig, params, potential)?;
            let (x, x_next) = self.noisy_channel(k);
            total += transition_logdensity(x, x_next, &mean, &sig, self.dt)?;
        }
        Ok(total)
    }

    /// The coordinates that carry noise at step `k`, before and after.
    fn noisy_channel(&self, k: usize) -> (&[f64], &[f64]) {
        match self.mode {
            Integrator::Overdamped => (&self.states[k].r, &self.states[k + 1].r),
            Integrator::Underdamped => (&self.states[k].v, &self.states[k + 1].v),
        }
    }

    fn mean_drift(
        &self,
        k: usize,
        control: &[f64],
        sig: &[f64],
        params: &DynamicsParams,
        potential: &PotentialSpec,
    ) -> Result<Vec<f64>> {
        let s = &self.states[k];
        let f = params.drift(potential, &s.r, self.d)?;
        Ok((0..f.len())
            .map(|j| {
                let friction = match self.mode {
                    Integrator::Overdamped => 0.0,
                    Integrator::Underdamped => params.gamma * s.v[j],
                };
                f[j] - friction + sig[j] * control[j]
            })
            .collect())
    }

    /// Rebuilds every state from `X_0`, the stored noise and controls; returns
    /// the largest absolute deviation from the stored states.
    pub fn replay_residual(&self, params: &DynamicsParams, potential: &PotentialSpec) -> Result<f64> {
        let mut state = self.states[0].clone();
        let mut worst: f64 = 0.0;
        for k in 0..self.steps() {
            let f = params.drift(potential, &state.r, self.d)?;
            state = step_with_noise(
                &state,
                &f,
                &self.behavior_bias[self.block(&self.behavior_bias, k)],
                params,
                k,
                &self.noise[self.block(&self.noise, k)],
            )?;
            let stored = &self.states[k + 1];
            worst = worst.max(max_abs_diff(&state.r, &stored.r));
            if self.mode == Integrator::Underdamped {
                worst = worst.max(max_abs_diff(&state.v, &stored.v));
            }
            // the overdamped velocity slot is a derived quantity; resync it
            state.v.clone_from(&stored.v);
        }
        Ok(worst)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Rolls out one trajectory per (initial state, target, seed) triple.
/// Overdamped velocities are the unconditional drift velocity `-grad U / gamma`
/// at the current positions, refreshed every step.
pub fn rollout_batch(
    controller: &dyn Controller,
    initial: &[SystemState],
    targets: &[TargetSpec],
    params: &DynamicsParams,
    potential: &PotentialSpec,
    seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    params.validate()?;
    if initial.len() != targets.len() || initial.len() != seeds.len() {
        return Err(Error::Invalid("rollout needs one target and one seed per initial state".into()));
    }
    let groups: Vec<Result<Vec<Trajectory>>> = initial
        .par_chunks(ROLLOUT_GROUP)
        .zip(targets.par_chunks(ROLLOUT_GROUP))
        .zip(seeds.par_chunks(ROLLOUT_GROUP))
        .map(|((init, tgt), sd)| rollout_group(controller, init, tgt, params, potential, sd))
        .collect();
    let mut out = Vec::with_capacity(initial.len());
    for g in groups {
        out.extend(g?);
    }
    Ok(out)
}

pub fn rollout(
    controller: &dyn Controller,
    initial: &SystemState,
    target: &TargetSpec,
    params: &DynamicsParams,
    potential: &PotentialSpec,
    seed: u64,
) -> Result<Trajectory> {
    Ok(rollout_batch(
        controller,
        std::slice::from_ref(initial),
        std::slice::from_ref(target),
        params,
        potential,
        &[seed],
    )?
    .remove(0))
}

fn checked_drift(params: &DynamicsParams, potential: &PotentialSpec, r: &[f64], d: usize, step: usize) -> Result<Vec<f64>> {
    let f = params.drift(potential, r, d)?;
    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteForce { step });
    }
    Ok(f)
}

fn rollout_group(
    controller: &dyn Controller,
    initial: &[SystemState],
    targets: &[TargetSpec],
    params: &DynamicsParams,
    potential: &PotentialSpec,
    seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    let k_max = params.steps;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut trajs = Vec::with_capacity(initial.len());
    let mut drifts = Vec::with_capacity(initial.len());
    for (s0, t) in initial.iter().zip(targets) {
        s0.validate()?;
        if s0.n != t.n || s0.d != t.d {
            return Err(Error::Invalid("initial state and target shapes differ".into()));
        }
        let mut s0 = s0.clone();
        s0.t_index = 0;
        let f = checked_drift(params, potential, &s0.r, s0.d, 0)?;
        if params.mode == Integrator::Overdamped {
            s0.v.clone_from(&f);
        }
        let m = s0.n * s0.d;
        drifts.push(f);
        trajs.push(Trajectory {
            n: s0.n,
            d: s0.d,
            mode: params.mode,
            dt: params.dt,
            states: {
                let mut v = Vec::with_capacity(k_max + 1);
                v.push(s0);
                v
            },
            noise: Vec::with_capacity(k_max * m),
            behavior_bias: Vec::with_capacity(k_max * m),
            sigma: Vec::with_capacity(k_max * t.n),
            log_p0: 0.0,
            log_pb: 0.0,
            reward: 0.0,
            target: t.clone(),
            seed: 0,
        });
    }
    for k in 0..k_max {
        let items: Vec<(&SystemState, &TargetSpec)> = trajs
            .iter()
            .map(|tr| (tr.states.last().expect("nonempty"), &tr.target))
            .collect();
        let controls = controller.controls(&items)?;
        for (b, ((tr, rng), f)) in trajs.iter_mut().zip(rngs.iter_mut()).zip(drifts.iter_mut()).enumerate() {
            let u = &controls[b];
            if u.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteForce { step: k });
            }
            let state = tr.states.last().expect("nonempty");
            let (mut next, dw) = step(state, f, u, params, k, rng)?;
            let sig: Vec<f64> = (0..tr.n * tr.d).map(|j| params.sigma(k, j / tr.d)).collect();
            let friction: Vec<f64> = match params.mode {
                Integrator::Overdamped => vec![0.0; f.len()],
                Integrator::Underdamped => state.v.iter().map(|v| params.gamma * v).collect(),
            };
            let base: Vec<f64> = f.iter().zip(&friction).map(|(a, b)| a - b).collect();
            let biased: Vec<f64> = (0..base.len()).map(|j| base[j] + sig[j] * u[j]).collect();
            let (x, x_next) = match params.mode {
                Integrator::Overdamped => (&state.r, &next.r),
                Integrator::Underdamped => (&state.v, &next.v),
            };
            tr.log_p0 += transition_logdensity(x, x_next, &base, &sig, params.dt)?;
            tr.log_pb += transition_logdensity(x, x_next, &biased, &sig, params.dt)?;
            *f = checked_drift(params, potential, &next.r, tr.d, k + 1)?;
            if params.mode == Integrator::Overdamped {
                next.v.clone_from(f);
            }
            tr.noise.extend_from_slice(&dw);
            tr.behavior_bias.extend_from_slice(u);
            tr.sigma.extend((0..tr.n).map(|i| params.sigma(k, i)));
            tr.states.push(next);
        }
    }
    for (tr, &seed) in trajs.iter_mut().zip(seeds) {
        tr.seed = seed;
        tr.reward = terminal_reward(&tr.final_state().r, &tr.target)?;
        tr.validate()?;
    }
    Ok(trajs)
}
