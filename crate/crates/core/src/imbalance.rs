//! Label distribution smoothing and the reweighted loss terms.
//!
//! BIS labels are binned to the 101 integers 0..=100. The empirical label
//! histogram is convolved with a truncated Gaussian kernel; the inverse of the
//! smoothed density, normalized so the densest occupied bin weighs 1, becomes
//! the per-sample loss weight.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

pub const NUM_BINS: usize = 101;

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_W_CAP: f64 = 50.0;
pub const DEFAULT_LAMBDA_H: f64 = 5.0;
pub const DEFAULT_LAMBDA_W: f64 = 10.0;

/// Bin index of a BIS value, rounding half away from zero.
pub fn bis_bin(y: f64) -> Result<usize> {
    if !(0.0..=100.0).contains(&y) {
        return Err(Error::OutOfRangeTarget(y));
    }
    Ok(y.round() as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDensity {
    pub empirical: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub kernel_sigma: f64,
    pub kernel_radius: usize,
}

/// Truncated Gaussian weights for offsets `-radius..=radius`.
fn kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

pub fn smooth_density(targets: &[f64], sigma: f64, radius: usize) -> Result<LabelDensity> {
    if !(sigma > 0.0) || radius < 1 {
        return Err(Error::Config(format!(
            "kernel sigma {sigma} must be positive and radius {radius} at least 1"
        )));
    }
    let mut empirical = vec![0.0; NUM_BINS];
    for &y in targets {
        empirical[bis_bin(y)?] += 1.0;
    }
    let k = kernel(sigma, radius);
    let r = radius as i64;
    let mut smoothed = vec![0.0; NUM_BINS];
    for (src, &count) in empirical.iter().enumerate() {
        if count == 0.0 {
            continue;
        }
        let lo = (src as i64 - r).max(0) as usize;
        let hi = (src as i64 + r).min(NUM_BINS as i64 - 1) as usize;
        // Kernel mass that lands inside [0, 100] is renormalized to one.
        let offset = |dst: usize| (dst as i64 - src as i64 + r) as usize;
        let z: f64 = (lo..=hi).map(|d| k[offset(d)]).sum();
        for dst in lo..=hi {
            smoothed[dst] += count * k[offset(dst)] / z;
        }
    }
    Ok(LabelDensity {
        empirical,
        smoothed,
        kernel_sigma: sigma,
        kernel_radius: radius,
    })
}

/// Per-bin loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub w: Vec<f64>,
    pub w_cap: f64,
}

impl WeightTable {
    /// All-ones table, i.e. plain MSE.
    pub fn uniform() -> Self {
        Self {
            w: vec![1.0; NUM_BINS],
            w_cap: 1.0,
        }
    }

    pub fn weight(&self, y: f64) -> Result<f64> {
        Ok(self.w[bis_bin(y)?])
    }
}

pub fn weights_from_density(d: &LabelDensity, w_cap: f64) -> Result<WeightTable> {
    if !(w_cap > 0.0) {
        return Err(Error::Config(format!("weight cap {w_cap} must be positive")));
    }
    let peak = d.smoothed.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::EmptyDensity);
    }
    // 1/p normalized by the smallest occupied 1/p, which is 1/peak.
    let w = d
        .smoothed
        .iter()
        .map(|&p| if p > 0.0 { (peak / p).min(w_cap) } else { w_cap })
        .collect();
    Ok(WeightTable { w, w_cap })
}

/// Writes `bin,empirical,smoothed,weight` rows for every bin.
pub fn write_weight_csv<W: Write>(out: &mut W, d: &LabelDensity, t: &WeightTable) -> Result<()> {
    writeln!(out, "bin,empirical,smoothed,weight")?;
    for b in 0..NUM_BINS {
        writeln!(out, "{b},{},{},{}", d.empirical[b], d.smoothed[b], t.w[b])?;
    }
    Ok(())
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// Mean squared error between corrected and true histories, over all samples and steps.
pub fn history_loss(corrected: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    check_lengths(corrected.len(), truth.len(), "history batch")?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (c, t) in corrected.iter().zip(truth) {
        check_lengths(c.len(), t.len(), "history length")?;
        total += c.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += c.len();
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// Weighted MSE with weights looked up by the true value's bin.
pub fn weighted_mse(pred: &[f64], truth: &[f64], table: &WeightTable) -> Result<f64> {
    let w = truth.iter().map(|&y| table.weight(y)).collect::<Result<Vec<_>>>()?;
    weighted_mse_with(pred, truth, &w)
}

/// Weighted MSE with explicit per-sample weights.
pub fn weighted_mse_with(pred: &[f64], truth: &[f64], weights: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), truth.len(), "predictions")?;
    check_lengths(pred.len(), weights.len(), "weights")?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred
        .iter()
        .zip(truth)
        .zip(weights)
        .map(|((p, y), w)| w * (p - y) * (p - y))
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn total_objective(l_h: f64, l_w: f64, lambda_h: f64, lambda_w: f64) -> Result<f64> {
    if !(l_h.is_finite() && l_w.is_finite() && lambda_h.is_finite() && lambda_w.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(lambda_h * l_h + lambda_w * l_w)
}

/// Loss coefficients of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub lambda_h: f64,
    pub lambda_w: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda_h: DEFAULT_LAMBDA_H,
            lambda_w: DEFAULT_LAMBDA_W,
        }
    }
}

/// Differentiable combined objective on a graph.
///
/// `corrected` and `history` are `[n, T]`, `pred` and `target` are `[n]` and
/// `weights` holds the per-sample weights. `batch_n` is the full batch size the
/// means divide by, so that micro-batches of one batch sum to the batch objective.
#[allow(clippy::too_many_arguments)]
pub fn objective_on_graph(
    g: &mut Graph,
    corrected: Var,
    history: Var,
    pred: Var,
    target: Var,
    weights: Var,
    batch_n: usize,
    lw: ObjectiveWeights,
) -> Result<Var> {
    let steps = *g
        .shape(corrected)
        .last()
        .ok_or_else(|| Error::ShapeMismatch("history of scalar".into()))?;
    let dh = g.sub(corrected, history)?;
    let sq_h = g.square(dh)?;
    let sum_h = g.sum_all(sq_h)?;
    let l_h = g.scale(sum_h, lw.lambda_h / (batch_n * steps) as f64)?;

    let dy = g.sub(pred, target)?;
    let sq = g.square(dy)?;
    let weighted = g.mul(sq, weights)?;
    let sum_w = g.sum_all(weighted)?;
    let l_w = g.scale(sum_w, lw.lambda_w / batch_n as f64)?;
    g.add(l_h, l_w)
}
