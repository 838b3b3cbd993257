//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::biasnet::NetConfig;
use crate::dynamics::{DynamicsParams, Integrator};
use crate::error::{Error, Result};
use crate::objective::Objective;

/// Everything a training run needs. Config-file keys are the field names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_rollouts: usize,
    pub n_epochs: usize,
    /// Trajectories simulated per rollout.
    pub samples: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub dt: f64,
    /// Integration steps per trajectory.
    pub steps: usize,
    pub n: usize,
    pub d: usize,
    /// Radius of the Gaussian terminal target.
    pub sigma: f64,
    pub gamma: f64,
    pub lr: f64,
    /// Learning rate of the log-variance offset.
    pub lv_lr: f64,
    pub mode: Integrator,
    pub objective: Objective,
    pub velocity_conditioning: bool,
    pub tau_start: f64,
    pub tau_end: f64,
    pub k_b: f64,
    pub mass: f64,
    pub seed: u64,
    /// `double_well`, `double_well:a,b`, `muller_brown`, or a manifold
    /// checkpoint path.
    pub potential: String,
    /// `point:x0,x1,..` (a full `n x d` state) or a point-cloud CSV path.
    pub initial: String,
    pub target: String,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
    pub md_mode: bool,
    /// Trajectories per gradient graph; bounds peak memory.
    pub chunk: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_rollouts: 10,
            n_epochs: 20,
            samples: 16,
            batch_size: 16,
            buffer_capacity: 1000,
            dt: 0.01,
            steps: 100,
            n: 1,
            d: 2,
            sigma: 0.1,
            gamma: 1.0,
            lr: 1e-3,
            lv_lr: 1e-2,
            mode: Integrator::Overdamped,
            objective: Objective::Ce,
            velocity_conditioning: true,
            tau_start: 0.1,
            tau_end: 0.1,
            k_b: 1.0,
            mass: 1.0,
            seed: 0,
            potential: "double_well".into(),
            initial: "point:-1,0".into(),
            target: "point:1,0".into(),
            width: 32,
            layers: 2,
            heads: 4,
            ff: 64,
            dropout: 0.0,
            md_mode: false,
            chunk: 16,
            clip_norm: 10.0,
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! via_fromstr {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_fromstr!(usize, u64, f64, bool, String, Integrator, Objective);

macro_rules! config_fields {
    ($($field:ident),* $(,)?) => {
        impl TrainConfig {
            /// Every accepted key, in file order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = ConfigValue::parse_value(value).ok_or_else(|| {
                            Error::Config(format!("bad value `{value}` for key `{key}`"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// The config in file syntax; parsing it back gives an equal value.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", stringify!($field), self.$field.render()).expect("string write");)*
                out
            }
        }
    };
}

config_fields!(
    n_rollouts,
    n_epochs,
    samples,
    batch_size,
    buffer_capacity,
    dt,
    steps,
    n,
    d,
    sigma,
    gamma,
    lr,
    lv_lr,
    mode,
    objective,
    velocity_conditioning,
    tau_start,
    tau_end,
    k_b,
    mass,
    seed,
    potential,
    initial,
    target,
    width,
    layers,
    heads,
    ff,
    dropout,
    md_mode,
    chunk,
    clip_norm,
);

impl TrainConfig {
    /// Applies `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", ln + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("samples", self.samples),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("steps", self.steps),
            ("n", self.n),
            ("d", self.d),
            ("chunk", self.chunk),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        let reals = [
            ("dt", self.dt),
            ("sigma", self.sigma),
            ("gamma", self.gamma),
            ("lr", self.lr),
            ("lv_lr", self.lv_lr),
            ("k_b", self.k_b),
            ("mass", self.mass),
            ("clip_norm", self.clip_norm),
        ];
        if let Some((k, _)) = reals.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("`{k}` must be positive and finite")));
        }
        if !(self.tau_start >= 0.0 && self.tau_end >= 0.0) {
            return Err(Error::Config("temperatures must be nonnegative".into()));
        }
        self.net_config().validate()?;
        self.dynamics().validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            d: self.d,
            n: self.n,
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            ff: self.ff,
            dropout: self.dropout,
            velocity_conditioning: self.velocity_conditioning,
            md_mode: self.md_mode,
        }
    }

    pub fn dynamics(&self) -> DynamicsParams {
        DynamicsParams {
            mode: self.mode,
            gamma: self.gamma,
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            k_b: self.k_b,
            masses: vec![self.mass],
            dt: self.dt,
            steps: self.steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.lr = 1.0 / 3.0;
        c.objective = Objective::Lv;
        c.mode = Integrator::Underdamped;
        c.initial = "cloud.csv".into();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(TrainConfig::KEYS.len(), c.to_text().lines().count());
    }

    #[test]
    fn comments_and_errors() {
        let c = TrainConfig::parse("# header\nn_rollouts = 100 # full scale\n\nn_epochs=1000\n").unwrap();
        assert_eq!((c.n_rollouts, c.n_epochs), (100, 1000));
        let e = TrainConfig::parse("learning_rate = 1").unwrap_err();
        assert!(e.to_string().contains("learning_rate"));
        assert!(TrainConfig::parse("lr = fast").is_err());
        assert!(TrainConfig::parse("lr").is_err());
        assert!(TrainConfig::parse("objective = kl").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig { samples: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { heads: 3, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { n_rollouts: 0, ..TrainConfig::default() };
        assert!(c.validate().is_ok());
    }
}
