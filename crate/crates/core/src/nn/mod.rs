//! The depth-of-anesthesia network.
//!
//! Three LSTMs encode the propofol rate, remifentanil rate and pseudo-BIS
//! histories. Their concatenated states feed a bottleneck that produces the
//! corrected history, and, after a linear projection, a gated residual network
//! that mixes in the static covariates. Interpretable multi-head attention
//! runs over the fused sequence; its last step, together with the final hidden
//! state of each LSTM, passes through a decoder bottleneck to the prediction.

mod blocks;
mod io;
mod train;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Var};
use crate::datapipe::{Norms, TrainingSample, WINDOW_BINS};
use crate::error::{Error, Result};

pub use blocks::{
    activation, attention_last, encoder_forward, grn_forward, interpretable_attention, lstm_step,
    model_forward, Activation, Attention, Encoded, ForwardOutput,
};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model};
pub use train::{
    evaluate_objective, fit, lr_for_epoch, predict_samples, Adam, EpochLog, FitReport, TrainConfig,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const STATIC_DIM: usize = 4;
pub const LSTM_NAMES: [&str; 3] = ["lstm_ppf", "lstm_rftn", "lstm_pseudo"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lstm_hidden: usize,
    pub grn_hidden: usize,
    pub num_heads: usize,
    pub bottleneck: [usize; 3],
    pub seq_len: usize,
    pub static_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lstm_hidden: 64,
            grn_hidden: 64,
            num_heads: 4,
            bottleneck: [64, 32, 1],
            seq_len: WINDOW_BINS,
            static_dim: STATIC_DIM,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lstm_hidden == 0 || self.grn_hidden == 0 || self.num_heads == 0 || self.seq_len == 0 {
            return bad("hidden sizes, head count and sequence length must be positive".into());
        }
        if self.grn_hidden % self.num_heads != 0 {
            return bad(format!(
                "grn_hidden {} is not divisible by {} heads",
                self.grn_hidden, self.num_heads
            ));
        }
        if self.bottleneck.contains(&0) || self.bottleneck[2] != 1 {
            return bad(format!(
                "bottleneck widths {:?} must be positive and end in 1",
                self.bottleneck
            ));
        }
        if self.static_dim != STATIC_DIM {
            return bad(format!("static_dim must be {STATIC_DIM}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.dropout != 0.0 {
            log::warn!("dropout is not applied; training is deterministic");
        }
        Ok(())
    }

    pub fn d_attn(&self) -> usize {
        self.grn_hidden / self.num_heads
    }

    /// Name, shape and initialization of every parameter.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let h = self.lstm_hidden;
        let g = self.grn_hidden;
        let d = self.d_attn();
        let [b0, b1, b2] = self.bottleneck;
        let mut v = Vec::new();
        let dense = |v: &mut Vec<_>, name: &str, i: usize, o: usize| {
            v.push((format!("{name}.w"), vec![i, o], Init::Uniform(i)));
            v.push((format!("{name}.b"), vec![o], Init::Zero));
        };
        for name in LSTM_NAMES {
            v.push((format!("{name}.w_ih"), vec![1, 4 * h], Init::Uniform(1)));
            v.push((format!("{name}.w_hh"), vec![h, 4 * h], Init::Uniform(h)));
            v.push((format!("{name}.bias"), vec![4 * h], Init::LstmBias(h)));
        }
        dense(&mut v, "enc.fc1", 3 * h, b0);
        dense(&mut v, "enc.fc2", b0, b1);
        dense(&mut v, "enc.fc3", b1, b2);
        dense(&mut v, "proj", 3 * h, g);
        dense(&mut v, "grn.fc_a", g, g);
        v.push(("grn.fc_c.w".into(), vec![self.static_dim, g], Init::Uniform(self.static_dim)));
        dense(&mut v, "grn.fc2", g, g);
        dense(&mut v, "grn.value", g, g);
        dense(&mut v, "grn.gate", g, g);
        v.push(("grn.ln.gamma".into(), vec![g], Init::One));
        v.push(("grn.ln.beta".into(), vec![g], Init::Zero));
        for head in 0..self.num_heads {
            v.push((format!("attn.q{head}"), vec![g, d], Init::Uniform(g)));
            v.push((format!("attn.k{head}"), vec![g, d], Init::Uniform(g)));
        }
        v.push(("attn.v".into(), vec![g, d], Init::Uniform(g)));
        v.push(("attn.out".into(), vec![d, g], Init::Uniform(d)));
        dense(&mut v, "dec.fc1", g + 3 * h, b0);
        dense(&mut v, "dec.fc2", b0, b1);
        dense(&mut v, "dec.fc3", b1, b2);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on ±1/√fan_in.
    Uniform(usize),
    Zero,
    One,
    /// Zero except the forget-gate block, which starts at 1.
    LstmBias(usize),
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub tensors: BTreeMap<String, Array>,
}

impl ModelWeights {
    pub fn get(&self, name: &str) -> Result<&Array> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))
    }

    /// Checks names and shapes against the configuration.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = cfg.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors for a layout of {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        for (name, shape, _) in layout {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Array::numel).sum()
    }
}

pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in cfg.layout() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Uniform(fan_in) => {
                let a = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..=a)).collect()
            }
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
            Init::LstmBias(h) => (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect(),
        };
        tensors.insert(name, Array::new(shape, data)?);
    }
    Ok(ModelWeights { tensors })
}

/// Everything needed to run a trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub norms: Norms,
    pub weights: ModelWeights,
}

/// Parameters placed on a graph.
pub struct Params {
    vars: BTreeMap<String, Var>,
}

impl Params {
    /// Adds every tensor as a differentiable leaf, or as a constant when
    /// `trainable` is false.
    pub fn attach(g: &mut Graph, w: &ModelWeights, trainable: bool) -> Self {
        let vars = w
            .tensors
            .iter()
            .map(|(k, a)| {
                let v = if trainable { g.leaf(a.clone()) } else { g.constant(a.clone()) };
                (k.clone(), v)
            })
            .collect();
        Self { vars }
    }

    /// Pairs layout names with vars already on the graph.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        Self {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Network inputs for a batch, all on the normalized scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub steps: usize,
    /// `[B, T]` each.
    pub ppf: Vec<f64>,
    pub rftn: Vec<f64>,
    pub pseudo: Vec<f64>,
    /// `[B, 4]`.
    pub statics: Vec<f64>,
    /// `[B, T]` normalized true history.
    pub history: Vec<f64>,
    /// `[B]` normalized targets.
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
}

impl Batch {
    pub fn from_samples(samples: &[&TrainingSample], norms: &Norms) -> Result<Self> {
        let size = samples.len();
        let steps = samples.first().map_or(WINDOW_BINS, |s| s.x_pseudo.len());
        let mut b = Self {
            size,
            steps,
            ppf: Vec::with_capacity(size * steps),
            rftn: Vec::with_capacity(size * steps),
            pseudo: Vec::with_capacity(size * steps),
            statics: Vec::with_capacity(size * STATIC_DIM),
            history: Vec::with_capacity(size * steps),
            target: Vec::with_capacity(size),
            weight: Vec::with_capacity(size),
        };
        for s in samples {
            if s.x_pseudo.len() != steps || s.x_drug.len() != 2 * steps || s.y_history.len() != steps {
                return Err(Error::ShapeMismatch(format!(
                    "sample at t = {} does not have {steps} steps",
                    s.t
                )));
            }
            for row in s.x_drug.chunks(2) {
                b.ppf.push(row[0]);
                b.rftn.push(row[1]);
            }
            b.pseudo.extend_from_slice(&s.x_pseudo);
            b.statics.extend_from_slice(&s.statics);
            b.history.extend(s.y_history.iter().map(|&y| norms.bis.apply(y)));
            b.target.push(norms.bis.apply(s.y_target));
            b.weight.push(s.weight);
        }
        Ok(b)
    }

    fn seq(&self, data: &[f64]) -> Result<Array> {
        Array::new(vec![self.size, self.steps, 1], data.to_vec())
    }

    /// Input nodes `(ppf, rftn, pseudo, statics)` as constants.
    pub fn attach_inputs(&self, g: &mut Graph) -> Result<[Var; 4]> {
        Ok([
            g.constant(self.seq(&self.ppf)?),
            g.constant(self.seq(&self.rftn)?),
            g.constant(self.seq(&self.pseudo)?),
            g.constant(Array::new(vec![self.size, STATIC_DIM], self.statics.clone())?),
        ])
    }
}

#[cfg(test)]
mod tests;
