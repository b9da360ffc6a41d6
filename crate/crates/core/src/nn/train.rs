use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph};
use crate::datapipe::{Dataset, Norms, TrainingSample};
use crate::error::{Error, Result};
use crate::imbalance::{
    objective_on_graph, smooth_density, weights_from_density, ObjectiveWeights, WeightTable,
    DEFAULT_SIGMA, DEFAULT_W_CAP,
};

use super::{init_weights, model_forward, Batch, Model, ModelConfig, ModelWeights, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per graph; gradients accumulate over micro-batches up to `batch_size`.
    pub micro_batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub lambda_h: f64,
    pub lambda_w: f64,
    pub reweight: bool,
    pub kernel_sigma: f64,
    pub w_cap: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1024,
            micro_batch: 128,
            lr: 0.03,
            lr_decay: 0.1,
            decay_every: 10,
            lambda_h: 5.0,
            lambda_w: 10.0,
            reweight: true,
            kernel_sigma: DEFAULT_SIGMA,
            w_cap: DEFAULT_W_CAP,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 || self.decay_every == 0 {
            return Err(Error::Config(
                "batch size, micro-batch and decay interval must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} and decay {} must be positive",
                self.lr, self.lr_decay
            )));
        }
        if !(self.lambda_h >= 0.0) || !(self.lambda_w >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    fn objective(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda_h: self.lambda_h,
            lambda_w: self.lambda_w,
        }
    }

    /// LDS weights over the training targets, or `None` for plain MSE.
    pub fn weight_table(&self, dataset: &Dataset) -> Result<Option<WeightTable>> {
        if !self.reweight {
            return Ok(None);
        }
        let radius = (2.0 * self.kernel_sigma).round().max(1.0) as usize;
        let density = smooth_density(&dataset.targets(), self.kernel_sigma, radius)?;
        weights_from_density(&density, self.w_cap).map(Some)
    }
}

/// Learning rate of a 0-based epoch.
pub fn lr_for_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, w: &mut ModelWeights, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let t = w
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("gradient for unknown {name}")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            if t.numel() != g.len() {
                return Err(Error::ShapeMismatch(format!("gradient size for {name}")));
            }
            let shape = t.shape().to_vec();
            let mut data = t.data().to_vec();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                data[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
            *t = Array::new(shape, data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean objective over the epoch's batches, before each update.
    pub objective: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub weights: ModelWeights,
    pub log: Vec<EpochLog>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub table: Option<WeightTable>,
}

fn materialize<'a>(
    dataset: &Dataset,
    index: &[(usize, usize)],
    table: Option<&WeightTable>,
    buf: &'a mut Vec<TrainingSample>,
) -> Result<Vec<&'a TrainingSample>> {
    buf.clear();
    for &(c, t) in index {
        buf.push(dataset.cases[c].sample(t, table)?);
    }
    Ok(buf.iter().collect())
}

/// Objective of one micro-batch scaled for a batch of `batch_n`, with
/// gradients accumulated into `grads` when given.
fn micro_step(
    cfg: &ModelConfig,
    w: &ModelWeights,
    batch: &Batch,
    batch_n: usize,
    lw: ObjectiveWeights,
    grads: Option<&mut BTreeMap<String, Vec<f64>>>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = Params::attach(&mut g, w, grads.is_some());
    let inputs = batch.attach_inputs(&mut g)?;
    let out = model_forward(&mut g, &p, cfg, inputs)?;
    let history = g.constant(Array::new(vec![batch.size, batch.steps], batch.history.clone())?);
    let target = g.constant(Array::vector(batch.target.clone())?);
    let weight = g.constant(Array::vector(batch.weight.clone())?);
    let loss = objective_on_graph(&mut g, out.corrected, history, out.pred, target, weight, batch_n, lw)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    if let Some(acc) = grads {
        let mut gr = g.backward(loss)?;
        for (name, &v) in p.iter() {
            let d = gr
                .take(v)
                .ok_or_else(|| Error::ShapeMismatch(format!("no gradient for {name}")))?;
            match acc.get_mut(name) {
                Some(a) => a.iter_mut().zip(d.data()).for_each(|(a, d)| *a += d),
                None => {
                    acc.insert(name.clone(), d.into_data());
                }
            }
        }
    }
    Ok(value)
}

/// Mean objective over the whole dataset.
pub fn evaluate_objective(
    dataset: &Dataset,
    norms: &Norms,
    cfg: &ModelConfig,
    train: &TrainConfig,
    w: &ModelWeights,
    table: Option<&WeightTable>,
) -> Result<f64> {
    let index = dataset.index();
    if index.is_empty() {
        return Err(Error::Config("dataset has no samples".into()));
    }
    let mut buf = Vec::new();
    let mut total = 0.0;
    for chunk in index.chunks(train.micro_batch) {
        let samples = materialize(dataset, chunk, table, &mut buf)?;
        let batch = Batch::from_samples(&samples, norms)?;
        total += micro_step(cfg, w, &batch, index.len(), train.objective(), None)?;
    }
    Ok(total)
}

/// Trains from `init`, or from seeded fresh weights when `None`.
pub fn fit(
    dataset: &Dataset,
    norms: &Norms,
    cfg: &ModelConfig,
    train: &TrainConfig,
    init: Option<ModelWeights>,
) -> Result<FitReport> {
    cfg.validate()?;
    train.validate()?;
    let mut weights = match init {
        Some(w) => {
            w.check(cfg)?;
            w
        }
        None => init_weights(cfg, train.seed)?,
    };
    let table = train.weight_table(dataset)?;
    let table_ref = table.as_ref();
    let mut index = dataset.index();
    if index.is_empty() {
        return Err(Error::Config("dataset has no samples".into()));
    }
    let initial_objective = evaluate_objective(dataset, norms, cfg, train, &weights, table_ref)?;
    log::info!(
        "training {} parameters on {} samples, initial objective {initial_objective:.5}",
        weights.num_parameters(),
        index.len()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut adam = Adam::default();
    let mut buf = Vec::new();
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let started = Instant::now();
        let lr = lr_for_epoch(train, epoch);
        index.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, batch_idx) in index.chunks(train.batch_size).enumerate() {
            let mut grads = BTreeMap::new();
            let mut batch_obj = 0.0;
            for chunk in batch_idx.chunks(train.micro_batch) {
                let samples = materialize(dataset, chunk, table_ref, &mut buf)?;
                let batch = Batch::from_samples(&samples, norms)?;
                batch_obj += micro_step(cfg, &weights, &batch, batch_idx.len(), train.objective(), Some(&mut grads))
                    .map_err(|e| match e {
                        Error::NonFinite(_) => Error::NonFiniteLoss { epoch, batch: b },
                        e => e,
                    })?;
            }
            if grads.values().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam.step(&mut weights, &grads, lr)?;
            sum += batch_obj * batch_idx.len() as f64;
        }
        let entry = EpochLog {
            epoch,
            lr,
            objective: sum / index.len() as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} lr {:.2e} objective {:.5} ({:.1} s)",
            entry.epoch,
            entry.lr,
            entry.objective,
            entry.seconds
        );
        log.push(entry);
    }
    let final_objective = evaluate_objective(dataset, norms, cfg, train, &weights, table_ref)?;
    log::info!("final objective {final_objective:.5}");
    Ok(FitReport {
        weights,
        log,
        initial_objective,
        final_objective,
        table,
    })
}

/// De-normalized predictions, clamped to the BIS range.
pub fn predict_samples(model: &Model, samples: &[TrainingSample], chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&TrainingSample> = part.iter().collect();
        let batch = Batch::from_samples(&refs, &model.norms)?;
        let mut g = Graph::new();
        let p = Params::attach(&mut g, &model.weights, false);
        let inputs = batch.attach_inputs(&mut g)?;
        let fwd = model_forward(&mut g, &p, &model.config, inputs)?;
        out.extend(
            g.value(fwd.pred)
                .data()
                .iter()
                .map(|&z| model.norms.bis.invert(z).clamp(0.0, 100.0)),
        );
    }
    Ok(out)
}
