use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context as _, Result};
use doa_core::imbalance::{smooth_density, write_weight_csv};
use doa_core::nn::{evaluate_objective, fit, load_model, model_to_bytes, Model, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use super::{load_dataset, norms_beside};
use crate::config::{pick, Context};
use crate::{failure, fsio};

#[derive(clap::Args)]
pub struct Args {
    /// Ingested dataset directory [default: <data-dir>/dataset].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory [default: <data-dir>/model].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue training from this model file; its architecture is kept.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Samples per computation graph; gradients accumulate up to --batch-size.
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Factor applied to the learning rate every --decay-every epochs.
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    /// Weight of the history-correction loss.
    #[arg(long)]
    lambda_h: Option<f64>,
    /// Weight of the reweighted target loss.
    #[arg(long)]
    lambda_w: Option<f64>,
    /// Train with plain MSE instead of label-density weights.
    #[arg(long)]
    no_reweight: bool,
    #[arg(long)]
    kernel_sigma: Option<f64>,
    #[arg(long)]
    w_cap: Option<f64>,
    #[arg(long)]
    lstm_hidden: Option<usize>,
    #[arg(long)]
    grn_hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Widths of the three bottleneck layers, e.g. 64,32,1.
    #[arg(long)]
    bottleneck: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Section {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    warm_start: Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    micro_batch: Option<usize>,
    lr: Option<f64>,
    lr_decay: Option<f64>,
    decay_every: Option<usize>,
    lambda_h: Option<f64>,
    lambda_w: Option<f64>,
    reweight: Option<bool>,
    kernel_sigma: Option<f64>,
    w_cap: Option<f64>,
    lstm_hidden: Option<usize>,
    grn_hidden: Option<usize>,
    heads: Option<usize>,
    bottleneck: Option<String>,
}

#[derive(Serialize)]
struct Effective<'a> {
    command: &'static str,
    data: &'a PathBuf,
    out: &'a PathBuf,
    warm_start: &'a Option<PathBuf>,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct Report {
    samples: usize,
    parameters: usize,
    initial_objective: f64,
    final_objective: f64,
    val_objective: Option<f64>,
    model_sha256: String,
}

fn parse_bottleneck(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| failure::config(format!("bottleneck `{s}` is not three integers")))?;
    v.try_into()
        .map_err(|_| failure::config(format!("bottleneck `{s}` needs three widths")))
}

pub fn run(ctx: &Context, a: &Args) -> Result<()> {
    let s: Section = ctx.section("train")?;
    let d = TrainConfig::default();
    let train = TrainConfig {
        epochs: pick(&a.epochs, &s.epochs, d.epochs),
        batch_size: pick(&a.batch_size, &s.batch_size, d.batch_size),
        micro_batch: pick(&a.micro_batch, &s.micro_batch, d.micro_batch),
        lr: pick(&a.lr, &s.lr, d.lr),
        lr_decay: pick(&a.lr_decay, &s.lr_decay, d.lr_decay),
        decay_every: pick(&a.decay_every, &s.decay_every, d.decay_every),
        lambda_h: pick(&a.lambda_h, &s.lambda_h, d.lambda_h),
        lambda_w: pick(&a.lambda_w, &s.lambda_w, d.lambda_w),
        reweight: if a.no_reweight { false } else { s.reweight.unwrap_or(d.reweight) },
        kernel_sigma: pick(&a.kernel_sigma, &s.kernel_sigma, d.kernel_sigma),
        w_cap: pick(&a.w_cap, &s.w_cap, d.w_cap),
        seed: ctx.seed,
    };
    train.validate()?;

    let warm_path = a.warm_start.clone().or(s.warm_start.clone());
    let warm = match &warm_path {
        Some(p) => {
            fsio::require(p, "warm-start model")?;
            Some(load_model(p).with_context(|| format!("loading {}", p.display()))?)
        }
        None => None,
    };
    let arch_given = a.lstm_hidden.or(s.lstm_hidden).is_some()
        || a.grn_hidden.or(s.grn_hidden).is_some()
        || a.heads.or(s.heads).is_some()
        || a.bottleneck.is_some()
        || s.bottleneck.is_some();
    let config = match &warm {
        Some(m) => {
            if arch_given {
                return Err(failure::config("architecture flags cannot be combined with --warm-start"));
            }
            m.config.clone()
        }
        None => {
            let dc = ModelConfig::default();
            let bottleneck = match a.bottleneck.as_ref().or(s.bottleneck.as_ref()) {
                Some(b) => parse_bottleneck(b)?,
                None => dc.bottleneck,
            };
            ModelConfig {
                lstm_hidden: pick(&a.lstm_hidden, &s.lstm_hidden, dc.lstm_hidden),
                grn_hidden: pick(&a.grn_hidden, &s.grn_hidden, dc.grn_hidden),
                num_heads: pick(&a.heads, &s.heads, dc.num_heads),
                bottleneck,
                ..dc
            }
        }
    };
    config.validate()?;

    let data = ctx.path(&a.data, &s.data, "dataset");
    let out = ctx.path(&a.out, &s.out, "model");
    let train_set = load_dataset(&data.join("train.bin"))?;
    let norms = norms_beside(&data.join("train.bin"))?
        .ok_or_else(|| failure::data(format!("{} has no norms.json", data.display())))?;
    if let Some(m) = &warm {
        if m.norms != norms {
            return Err(doa_core::Error::ShapeMismatch(
                "warm-start model was normalized differently; ingest with --norms from the model".into(),
            )
            .into());
        }
    }
    let val_path = data.join("val.bin");
    let val_set = if val_path.exists() { Some(load_dataset(&val_path)?) } else { None };

    let report = fit(&train_set, &norms, &config, &train, warm.map(|m| m.weights))?;
    let model = Model {
        config: config.clone(),
        norms,
        weights: report.weights,
    };
    let bytes = model_to_bytes(&model)?;
    let val_objective = match &val_set {
        Some(v) if !v.is_empty() => Some(evaluate_objective(
            v,
            &model.norms,
            &config,
            &train,
            &model.weights,
            report.table.as_ref(),
        )?),
        _ => None,
    };

    fsio::create_dir(&out)?;
    fsio::write_atomic(&out.join("model.bin"), &bytes)?;
    fsio::write_with(&out.join("loss_log.csv"), |w| {
        writeln!(w, "epoch,lr,objective,seconds")?;
        for e in &report.log {
            writeln!(w, "{},{},{},{:.3}", e.epoch + 1, e.lr, e.objective, e.seconds)?;
        }
        Ok(())
    })?;
    if let Some(table) = &report.table {
        let radius = (2.0 * train.kernel_sigma).round().max(1.0) as usize;
        let density = smooth_density(&train_set.targets(), train.kernel_sigma, radius)?;
        fsio::write_with(&out.join("weights.csv"), |w| Ok(write_weight_csv(w, &density, table)?))?;
    }
    let summary = Report {
        samples: train_set.len(),
        parameters: model.weights.num_parameters(),
        initial_objective: report.initial_objective,
        final_objective: report.final_objective,
        val_objective,
        model_sha256: fsio::sha256_hex(&bytes),
    };
    fsio::write_json(&out.join("train_report.json"), &summary)?;
    fsio::write_json(
        &out.join("effective_config.json"),
        &Effective {
            command: "train",
            data: &data,
            out: &out,
            warm_start: &warm_path,
            model: &config,
            train: &train,
        },
    )?;
    log::info!(
        "objective {:.5} -> {:.5}; model {}",
        summary.initial_objective,
        summary.final_objective,
        summary.model_sha256
    );
    Ok(())
}
