//! Replay buffer of scored trajectories with softmax-weighted resampling.

use std::collections::VecDeque;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::biasnet::TargetSpec;
use crate::dynamics::{read_trajectory_csv, write_trajectory_csv, Integrator, Trajectory};
use crate::error::{Error, Result};
use crate::objective::{softmax, PathScore};

const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    /// Insertion number, unique over the buffer's lifetime.
    pub id: u64,
    pub trajectory: Trajectory,
    pub score: PathScore,
}

/// FIFO-capped store of past rollouts.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Entry>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(4096)),
            inserted: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter()
    }

    /// Scores the trajectory, appends it and evicts the oldest entry when full.
    pub fn push(&mut self, trajectory: Trajectory) -> Result<()> {
        trajectory.validate()?;
        let score = PathScore::of(&trajectory);
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(Entry {
            id: self.inserted,
            trajectory,
            score,
        });
        self.inserted += 1;
        Ok(())
    }

    /// Softmax of the stored log weights, oldest first.
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.entries.iter().map(|e| e.score.log_weight).collect::<Vec<_>>())
    }

    /// `batch` draws with replacement from the softmax over stored log weights.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Entry>> {
        if self.entries.is_empty() {
            return Err(Error::Invalid("cannot sample from an empty replay buffer".into()));
        }
        let dist = WeightedIndex::new(self.probabilities())
            .map_err(|e| Error::Invalid(format!("replay weights: {e}")))?;
        Ok((0..batch).map(|_| &self.entries[dist.sample(rng)]).collect())
    }

    /// Writes one trajectory CSV per entry plus `index.json` with scores and
    /// the arrays the CSV does not carry.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut records = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let file = format!("traj_{:08}.csv", e.id);
            write_trajectory_csv(&dir.join(&file), &e.trajectory)?;
            let t = &e.trajectory;
            records.push(Record {
                id: e.id,
                file,
                mode: t.mode,
                dt: t.dt,
                noise: t.noise.clone(),
                behavior_bias: t.behavior_bias.clone(),
                sigma: t.sigma.clone(),
                log_p0: t.log_p0,
                log_pb: t.log_pb,
                reward: t.reward,
                target: t.target.r_b.clone(),
                target_sigma: t.target.sigma,
                seed: t.seed,
                score: e.score,
            });
        }
        let index = Index {
            capacity: self.capacity,
            inserted: self.inserted,
            entries: records,
        };
        std::fs::write(dir.join(INDEX_FILE), serde_json::to_string(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Index = serde_json::from_str(&std::fs::read_to_string(dir.join(INDEX_FILE))?)?;
        let mut buf = Self::new(index.capacity)?;
        if index.entries.len() > index.capacity {
            return Err(Error::Parse("buffer index holds more entries than its capacity".into()));
        }
        for r in index.entries {
            let states = read_trajectory_csv(&dir.join(&r.file))?;
            let first = states.first().ok_or_else(|| Error::Parse(format!("{}: no states", r.file)))?;
            let (n, d) = (first.n, first.d);
            let trajectory = Trajectory {
                n,
                d,
                mode: r.mode,
                dt: r.dt,
                states,
                noise: r.noise,
                behavior_bias: r.behavior_bias,
                sigma: r.sigma,
                log_p0: r.log_p0,
                log_pb: r.log_pb,
                reward: r.reward,
                target: TargetSpec::new(n, d, r.target, r.target_sigma)?,
                seed: r.seed,
            };
            trajectory.validate()?;
            let score = PathScore::of(&trajectory);
            if score != r.score {
                return Err(Error::Parse(format!("{}: stored score disagrees with trajectory", r.file)));
            }
            buf.entries.push_back(Entry {
                id: r.id,
                trajectory,
                score,
            });
        }
        buf.inserted = index.inserted;
        Ok(buf)
    }
}

#[derive(Serialize, Deserialize)]
struct Index {
    capacity: usize,
    inserted: u64,
    entries: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    file: String,
    mode: Integrator,
    dt: f64,
    noise: Vec<f64>,
    behavior_bias: Vec<f64>,
    sigma: Vec<f64>,
    log_p0: f64,
    log_pb: f64,
    reward: f64,
    target: Vec<f64>,
    target_sigma: f64,
    seed: u64,
    score: PathScore,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::SystemState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(tag: f64, log_weight: f64) -> Trajectory {
        let s = SystemState::at_rest(1, 1, vec![tag]).unwrap();
        Trajectory {
            n: 1,
            d: 1,
            mode: Integrator::Overdamped,
            dt: 0.1,
            states: vec![s.clone(), s],
            noise: vec![0.0],
            behavior_bias: vec![0.0],
            sigma: vec![1.0],
            log_p0: 0.0,
            log_pb: 0.0,
            reward: log_weight,
            target: TargetSpec::new(1, 1, vec![0.0], 1.0).unwrap(),
            seed: 0,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(2).unwrap();
        for i in 0..3 {
            b.push(traj(i as f64, 0.0)).unwrap();
        }
        let ids: Vec<u64> = b.entries().map(|e| e.id).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn single_entry_always_drawn() {
        let mut b = ReplayBuffer::new(5).unwrap();
        b.push(traj(4.0, -3.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample(10, &mut rng).unwrap().iter().all(|e| e.id == 0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ReplayBuffer::new(0).is_err());
        let b = ReplayBuffer::new(1).unwrap();
        assert!(b.sample(1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut b = ReplayBuffer::new(1).unwrap();
        let mut t = traj(0.0, 0.0);
        t.noise.clear();
        assert!(b.push(t).is_err());
        let mut t = traj(0.0, 0.0);
        t.log_pb = f64::NAN;
        assert!(b.push(t).is_err());
    }
}
