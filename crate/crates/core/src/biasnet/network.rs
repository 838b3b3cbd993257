use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kabsch::{kabsch_align, Alignment};
use super::{assemble, push_tokens, token_dim, unit_direction, BiasOutput, TargetSpec};
use crate::autodiff::nn::{self, SetShape};
use crate::autodiff::{checkpoint, Bindings, Graph, Mode, NodeId, ParamSet, Tensor};
use crate::dynamics::SystemState;
use crate::error::{Error, Result};

const FRAME_REFERENCE: &str = "frame.reference";
const FRAME_MASK: &str = "frame.mask";

/// Architecture and conditioning switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub d: usize,
    /// Particle count the network was trained for; the encoder itself accepts
    /// any set size.
    pub n: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
    pub velocity_conditioning: bool,
    pub md_mode: bool,
}

impl NetConfig {
    /// The published architecture: width 256, 4 layers, 8 heads,
    /// feed-forward 512, dropout 0.1.
    pub fn full_scale(n: usize, d: usize) -> Self {
        Self {
            d,
            n,
            width: 256,
            layers: 4,
            heads: 8,
            ff: 512,
            dropout: 0.1,
            velocity_conditioning: true,
            md_mode: false,
        }
    }

    pub fn token_dim(&self) -> usize {
        token_dim(self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.d, self.n, self.width, self.layers, self.heads, self.ff];
        if positive.contains(&0) {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// JSON written next to every network checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub token_dim: usize,
    #[serde(flatten)]
    pub config: NetConfig,
}

/// Fixed reference structure defining the canonical frame in MD mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub reference: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

/// Network inputs for `sets` systems of `n` particles, in the frame the
/// network sees.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    pub sets: usize,
    pub n: usize,
    pub d: usize,
    /// `[sets, n, 3d + 1]`
    pub tokens: Tensor,
    /// `[sets, n, d]`, zero rows where the direction is undefined.
    pub s_hat: Tensor,
    /// `[sets, n, d]`, one where the direction is defined.
    pub defined: Tensor,
    /// Per-set alignment into the network frame (MD mode only).
    pub alignments: Option<Vec<Alignment>>,
}

impl BatchFeatures {
    /// Rotates a caller-frame `n x d` block of set `s` into the network frame.
    pub fn to_network_frame(&self, s: usize, x: &[f64]) -> Vec<f64> {
        match &self.alignments {
            None => x.to_vec(),
            Some(al) => {
                let mut out = vec![0.0; x.len()];
                for (a, b) in x.chunks_exact(self.d).zip(out.chunks_exact_mut(self.d)) {
                    al[s].rotate(a, b);
                }
                out
            }
        }
    }

    fn rotate_back(&self, s: usize, x: &mut [f64]) {
        if let Some(al) = &self.alignments {
            let mut tmp = vec![0.0; self.d];
            for chunk in x.chunks_exact_mut(self.d) {
                al[s].rotate_back(chunk, &mut tmp);
                chunk.copy_from_slice(&tmp);
            }
        }
    }
}

/// Transformer encoder over particle tokens with scalar and vector heads.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasNetwork {
    config: NetConfig,
    params: ParamSet,
    frame: Option<Frame>,
}

impl BiasNetwork {
    /// Fresh parameters: fan-in uniform weights, zero biases, unit norms and
    /// zero output layers, so an untrained network emits `ln 2 * s_hat`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let w = config.width;
        let mut linear = |params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, zero: bool| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = if zero {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                Tensor::uniform(&[fan_in, fan_out], -bound, bound, &mut rng)
            };
            params.insert(format!("{name}.weight"), weight);
            params.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        };
        let norm = |params: &mut ParamSet, name: &str| {
            params.insert(format!("{name}.gain"), Tensor::full(&[w], 1.0));
            params.insert(format!("{name}.bias"), Tensor::zeros(&[w]));
        };
        linear(&mut params, "input", config.token_dim(), w, false);
        for l in 0..config.layers {
            for p in ["q", "k", "v", "out"] {
                linear(&mut params, &format!("encoder.{l}.attn.{p}"), w, w, false);
            }
            norm(&mut params, &format!("encoder.{l}.norm1"));
            linear(&mut params, &format!("encoder.{l}.ff1"), w, config.ff, false);
            linear(&mut params, &format!("encoder.{l}.ff2"), config.ff, w, false);
            norm(&mut params, &format!("encoder.{l}.norm2"));
        }
        linear(&mut params, "alpha_head.0", w, w, false);
        linear(&mut params, "alpha_head.1", w, 1, true);
        linear(&mut params, "h_head.0", w, w, false);
        linear(&mut params, "h_head.1", w, config.d, true);
        Ok(Self {
            config,
            params,
            frame: None,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn frame(&self) -> Option<&Frame> {
        self.frame.as_ref()
    }

    /// Sets the MD-mode reference structure (`n x d`).
    pub fn set_frame(&mut self, frame: Frame) -> Result<()> {
        let c = &self.config;
        if frame.reference.len() != c.n * c.d {
            return Err(Error::Invalid(format!(
                "frame reference has {} coordinates, expected {}",
                frame.reference.len(),
                c.n * c.d
            )));
        }
        if frame.mask.as_ref().is_some_and(|m| m.len() != c.n) {
            return Err(Error::Invalid("frame mask length differs from n".into()));
        }
        self.frame = Some(frame);
        Ok(())
    }

    /// Tokens, directions and (in MD mode) alignments for a batch of systems.
    pub fn features(&self, items: &[(&SystemState, &TargetSpec)]) -> Result<BatchFeatures> {
        let Some(&(first, _)) = items.first() else {
            return Err(Error::Invalid("empty feature batch".into()));
        };
        let (n, d) = (first.n, first.d);
        if d != self.config.d {
            return Err(Error::Invalid(format!("network expects d = {}, got {d}", self.config.d)));
        }
        let tok = token_dim(d);
        let sets = items.len();
        let mut tokens = Vec::with_capacity(sets * n * tok);
        let mut s_hat = vec![0.0; sets * n * d];
        let mut defined = vec![0.0; sets * n * d];
        let mut alignments = self.config.md_mode.then(Vec::new);
        for (s, &(state, target)) in items.iter().enumerate() {
            target.check(state)?;
            if state.n != n {
                return Err(Error::Invalid("feature batch mixes particle counts".into()));
            }
            let (r, v, r_b) = match alignments.as_mut() {
                None => (state.r.clone(), state.v.clone(), target.r_b.clone()),
                Some(list) => {
                    let frame = self.frame.as_ref().ok_or_else(|| {
                        Error::Invalid("MD mode requires a frame reference".into())
                    })?;
                    let mask = frame.mask.as_deref();
                    let target_frame = kabsch_align(&target.r_b, &frame.reference, d, mask)?;
                    let al = kabsch_align(&state.r, &target_frame.aligned, d, mask)?;
                    let mut v = vec![0.0; n * d];
                    let mut dir = vec![0.0; n * d];
                    for i in 0..n {
                        al.rotate(&state.v[i * d..(i + 1) * d], &mut v[i * d..(i + 1) * d]);
                        let raw: Vec<f64> = (0..d).map(|a| target.r_b[i * d + a] - state.r[i * d + a]).collect();
                        al.rotate(&raw, &mut dir[i * d..(i + 1) * d]);
                    }
                    // the effective target keeps the caller-frame direction, rotated
                    let r_b: Vec<f64> = al.aligned.iter().zip(&dir).map(|(a, b)| a + b).collect();
                    let r = al.aligned.clone();
                    list.push(al);
                    (r, v, r_b)
                }
            };
            push_tokens(&r, &v, &r_b, d, self.config.velocity_conditioning, &mut tokens);
            for i in 0..n {
                if let Some(u) = unit_direction(&r[i * d..(i + 1) * d], &r_b[i * d..(i + 1) * d]) {
                    let at = (s * n + i) * d;
                    s_hat[at..at + d].copy_from_slice(&u);
                    defined[at..at + d].iter_mut().for_each(|x| *x = 1.0);
                }
            }
        }
        Ok(BatchFeatures {
            sets,
            n,
            d,
            tokens: Tensor::new(vec![sets, n, tok], tokens)?,
            s_hat: Tensor::new(vec![sets, n, d], s_hat)?,
            defined: Tensor::new(vec![sets, n, d], defined)?,
            alignments,
        })
    }

    /// Encoder and heads; input leaf `tokens`. Returns `(alpha_raw [S,n,1], h [S,n,d])`.
    pub fn encode(&self, g: &mut Graph, sets: usize, n: usize) -> (NodeId, NodeId) {
        let c = &self.config;
        let shape = SetShape {
            sets,
            tokens: n,
            width: c.width,
        };
        let x = g.input("tokens");
        let mut x = nn::linear(g, x, "input");
        for l in 0..c.layers {
            x = nn::encoder_layer(g, x, &format!("encoder.{l}"), shape, c.heads, c.dropout);
        }
        let head = |g: &mut Graph, name: &str| {
            let y = nn::linear(g, x, &format!("{name}.0"));
            let y = g.gelu(y);
            nn::linear(g, y, &format!("{name}.1"))
        };
        let alpha_raw = head(g, "alpha_head");
        let h = head(g, "h_head");
        (alpha_raw, h)
    }

    /// Differentiable assembled bias `[S, n, d]` in the network frame. Input
    /// leaves: `tokens`, `s_hat`, `defined`.
    pub fn bias_graph(&self, g: &mut Graph, sets: usize, n: usize) -> NodeId {
        let d = self.config.d;
        let (alpha_raw, h) = self.encode(g, sets, n);
        let s_hat = g.input("s_hat");
        let defined = g.input("defined");
        let ones_row = g.constant(Tensor::full(&[1, d], 1.0));
        let ones_sq = g.constant(Tensor::full(&[d, d], 1.0));
        let alpha = g.softplus(alpha_raw);
        let alpha = g.matmul(alpha, ones_row);
        let parallel = g.mul(alpha, s_hat);
        let sh = g.mul(s_hat, h);
        let sh = g.matmul(sh, ones_sq);
        let proj = g.mul(sh, s_hat);
        let orth = g.sub(h, proj);
        let orth = g.mul(orth, defined);
        g.add(parallel, orth)
    }

    /// Evaluation-mode bias for a prepared batch, mapped back to the caller frame.
    pub fn forward(&self, f: &BatchFeatures) -> Result<Vec<BiasOutput>> {
        let (sets, n, d) = (f.sets, f.n, f.d);
        let mut g = Graph::new();
        let (alpha_raw, h) = self.encode(&mut g, sets, n);
        let root = g.concat(&[alpha_raw, h], 2);
        let mut b = Bindings::new();
        b.bind_all(self.params.iter()).bind("tokens", &f.tokens);
        let values = g.evaluate(root, &b, Mode::Eval)?;
        let out = values.get(root)?.data();
        let mut result = Vec::with_capacity(sets);
        for s in 0..sets {
            let mut o = BiasOutput {
                alpha: vec![0.0; n],
                h: vec![0.0; n * d],
                s_hat: f.s_hat.data()[s * n * d..(s + 1) * n * d].to_vec(),
                b: vec![0.0; n * d],
            };
            for i in 0..n {
                let row = &out[(s * n + i) * (d + 1)..(s * n + i + 1) * (d + 1)];
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteBias { particle: i });
                }
                let hi = &row[1..];
                o.h[i * d..(i + 1) * d].copy_from_slice(hi);
                let at = (s * n + i) * d;
                let dir = (f.defined.data()[at] > 0.0).then(|| &f.s_hat.data()[at..at + d]);
                o.alpha[i] = assemble(row[0], hi, dir, &mut o.b[i * d..(i + 1) * d]);
            }
            f.rotate_back(s, &mut o.h);
            f.rotate_back(s, &mut o.s_hat);
            f.rotate_back(s, &mut o.b);
            result.push(o);
        }
        Ok(result)
    }

    pub fn compute_bias_batch(&self, items: &[(&SystemState, &TargetSpec)]) -> Result<Vec<BiasOutput>> {
        self.forward(&self.features(items)?)
    }

    pub fn compute_bias(&self, state: &SystemState, target: &TargetSpec) -> Result<BiasOutput> {
        Ok(self.compute_bias_batch(&[(state, target)])?.remove(0))
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            token_dim: self.config.token_dim(),
            config: self.config,
        }
    }

    /// Parameters plus the frame reference, as stored on disk.
    pub fn to_tensors(&self) -> ParamSet {
        let mut all = self.params.clone();
        if let Some(frame) = &self.frame {
            let (n, d) = (self.config.n, self.config.d);
            all.insert(
                FRAME_REFERENCE.into(),
                Tensor::new(vec![n, d], frame.reference.clone()).expect("validated frame"),
            );
            if let Some(mask) = &frame.mask {
                let m = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                all.insert(FRAME_MASK.into(), Tensor::new(vec![n], m).expect("validated mask"));
            }
        }
        all
    }

    pub fn from_tensors(config: NetConfig, mut all: ParamSet) -> Result<Self> {
        let template = Self::new(config, 0)?;
        let reference = all.remove(FRAME_REFERENCE);
        let mask = all.remove(FRAME_MASK);
        for (name, t) in &template.params {
            match all.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, config implies {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        if let Some(extra) = all.keys().find(|k| !template.params.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        let mut net = Self {
            config,
            params: all,
            frame: None,
        };
        if let Some(reference) = reference {
            net.set_frame(Frame {
                reference: reference.into_data(),
                mask: mask.map(|m| m.data().iter().map(|&x| x > 0.5).collect()),
            })?;
        }
        Ok(net)
    }

    /// Writes `path` (tensor container) and `path` with a `.json` extension
    /// (sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())?;
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(sidecar_path(path), json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar_path(path))
            .map_err(|e| Error::Checkpoint(format!("sidecar for {}: {e}", path.display())))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        if sidecar.token_dim != sidecar.config.token_dim() {
            return Err(Error::Checkpoint(format!(
                "sidecar token_dim {} disagrees with d = {}",
                sidecar.token_dim, sidecar.config.d
            )));
        }
        Self::from_tensors(sidecar.config, checkpoint::load(path)?)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}
