//! Browser demo on the double-well landscape: draw the energy, compare
//! unbiased and learned-bias paths, and train a few rollouts live.
//!
//! [`DemoCore`] holds the logic and is tested natively; [`Demo`] is the thin
//! JavaScript-facing wrapper.

use esbm::dynamics::{rollout_batch, Controller, ZeroControl};
use esbm::metrics::{is_hit, MetricsConfig};
use esbm::trainer::{Problem, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Plot window of the landscape: `(x_min, x_max, y_min, y_max)`.
pub const WINDOW: (f64, f64, f64, f64) = (-1.8, 1.8, -1.2, 1.2);

pub fn demo_config(seed: u64) -> TrainConfig {
    TrainConfig {
        n_rollouts: 0,
        n_epochs: 10,
        samples: 16,
        batch_size: 16,
        tau_start: 0.1,
        tau_end: 0.05,
        width: 16,
        layers: 1,
        heads: 2,
        ff: 32,
        seed,
        ..TrainConfig::default()
    }
}

/// Simulated paths, flattened for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    /// `count x (steps + 1) x 2` positions.
    pub points: Vec<f64>,
    pub count: usize,
    pub hits: usize,
}

pub struct DemoCore {
    trainer: Trainer,
    losses: Vec<f64>,
}

impl DemoCore {
    pub fn new(seed: u64) -> esbm::Result<Self> {
        let cfg = demo_config(seed);
        let problem = Problem::from_config(&cfg)?;
        Ok(Self {
            trainer: Trainer::new(cfg, problem)?,
            losses: Vec::new(),
        })
    }

    /// Energies on an `nx x ny` grid over [`WINDOW`], row-major with `y`
    /// increasing by row.
    pub fn energy_grid(&self, nx: usize, ny: usize) -> esbm::Result<Vec<f64>> {
        let (x0, x1, y0, y1) = WINDOW;
        let step = |lo: f64, hi: f64, k: usize, n: usize| lo + (hi - lo) * k as f64 / (n.max(2) - 1) as f64;
        let pot = &self.trainer.problem().potential;
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                out.push(pot.energy(&[step(x0, x1, i, nx), step(y0, y1, j, ny)])?);
            }
        }
        Ok(out)
    }

    /// `count` paths under the base dynamics or the current network. The
    /// same seed gives the same noise for both, so the pair differs only by
    /// the learned force.
    pub fn paths(&self, biased: bool, count: usize, seed: u64) -> esbm::Result<PathSet> {
        let cfg = self.trainer.config();
        let params = cfg.dynamics();
        let problem = self.trainer.problem();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (init, tgts, seeds) = problem.sample(cfg, &params, count, &mut rng)?;
        let controller: &dyn Controller = if biased { self.trainer.network() } else { &ZeroControl };
        let trajs = rollout_batch(controller, &init, &tgts, &params, &problem.potential, &seeds)?;
        let mc = MetricsConfig::default();
        Ok(PathSet {
            points: trajs.iter().flat_map(|t| t.states.iter().flat_map(|s| s.r.iter().copied())).collect(),
            count,
            hits: trajs.iter().filter(|t| is_hit(&t.final_state().r, &t.target, &mc)).count(),
        })
    }

    /// Runs `rollouts` collect-and-train cycles; returns the loss history.
    pub fn train(&mut self, rollouts: usize) -> esbm::Result<&[f64]> {
        for _ in 0..rollouts {
            let stats = self.trainer.run_rollout()?;
            self.losses.push(stats.loss);
        }
        Ok(&self.losses)
    }

    pub fn rollouts_done(&self) -> usize {
        self.losses.len()
    }

    pub fn steps(&self) -> usize {
        self.trainer.config().steps
    }
}

fn js(e: esbm::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    core: DemoCore,
    last_hits: usize,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Ok(Demo {
            core: DemoCore::new(seed.into()).map_err(js)?,
            last_hits: 0,
        })
    }

    pub fn energy_grid(&self, nx: usize, ny: usize) -> Result<Vec<f64>, JsError> {
        self.core.energy_grid(nx, ny).map_err(js)
    }

    /// Flattened positions; `last_hits` reports how many reached the target.
    pub fn paths(&mut self, biased: bool, count: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        let p = self.core.paths(biased, count, seed.into()).map_err(js)?;
        self.last_hits = p.hits;
        Ok(p.points)
    }

    pub fn last_hits(&self) -> usize {
        self.last_hits
    }

    pub fn train(&mut self, rollouts: usize) -> Result<Vec<f64>, JsError> {
        self.core.train(rollouts).map(<[f64]>::to_vec).map_err(js)
    }

    pub fn steps(&self) -> usize {
        self.core.steps()
    }

    pub fn window() -> Vec<f64> {
        vec![WINDOW.0, WINDOW.1, WINDOW.2, WINDOW.3]
    }
}
