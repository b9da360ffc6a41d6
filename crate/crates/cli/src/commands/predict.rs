use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context as _, Result};
use doa_core::datapipe::{prepare_case, Norms, PreparedCase, TrainingSample};
use doa_core::metrics::median;
use doa_core::nn::{load_model, predict_samples, Model};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{case_file, load_dataset, load_raw_cases, norms_beside, write_predictions, PredRow};
use crate::config::{pick, Context};
use crate::{failure, fsio};

#[derive(clap::Args)]
pub struct Args {
    /// Model file [default: <data-dir>/model/model.bin].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Ingested dataset file [default: <data-dir>/dataset/test.bin].
    #[arg(long, conflicts_with = "raw")]
    dataset: Option<PathBuf>,
    /// Predict directly from a directory of case CSVs.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Output directory [default: <data-dir>/predictions/model].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seconds between predictions [default: 1].
    #[arg(long)]
    stride: Option<usize>,
    /// Predict one second at a time and record the latency of every step.
    #[arg(long)]
    stream: bool,
    /// Only the first N cases.
    #[arg(long)]
    limit: Option<usize>,
    /// Samples per forward pass outside stream mode [default: 256].
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Section {
    model: Option<PathBuf>,
    dataset: Option<PathBuf>,
    raw: Option<PathBuf>,
    out: Option<PathBuf>,
    stride: Option<usize>,
    stream: Option<bool>,
    limit: Option<usize>,
    batch: Option<usize>,
}

#[derive(Serialize)]
struct Effective<'a> {
    command: &'static str,
    model: &'a PathBuf,
    input: &'a PathBuf,
    raw: bool,
    out: &'a PathBuf,
    stride: usize,
    stream: bool,
    limit: Option<usize>,
    batch: usize,
}

#[derive(Serialize)]
struct Latency {
    steps: usize,
    median_s: f64,
    p95_s: f64,
    max_s: f64,
}

/// Norms agree when every constant does; datasets and models both carry them.
pub fn check_norms(model: &Norms, data: &Norms) -> Result<()> {
    if model != data {
        return Err(doa_core::Error::ShapeMismatch(
            "dataset was normalized with different constants than the model".into(),
        )
        .into());
    }
    Ok(())
}

/// Cases to predict, normalized with the model's constants.
pub fn input_cases(
    ctx: &Context,
    dataset: Option<PathBuf>,
    raw: Option<PathBuf>,
    norms: &Norms,
) -> Result<(PathBuf, bool, Vec<PreparedCase>)> {
    match raw {
        Some(dir) => {
            let cases = load_raw_cases(&dir)?
                .iter()
                .map(|(s, p)| prepare_case(s, p, Some(norms), None))
                .collect::<doa_core::Result<Vec<_>>>()?;
            Ok((dir, true, cases))
        }
        None => {
            let path = dataset.unwrap_or_else(|| ctx.data_dir.join("dataset").join("test.bin"));
            let ds = load_dataset(&path)?;
            if let Some(n) = norms_beside(&path)? {
                check_norms(norms, &n)?;
            }
            Ok((path, false, ds.cases))
        }
    }
}

fn predict_case(model: &Model, case: &PreparedCase, stride: usize, batch: usize) -> Result<Vec<PredRow>> {
    let times: Vec<usize> = case.sample_times(stride).collect();
    let samples = times
        .iter()
        .map(|&t| case.sample(t, None))
        .collect::<doa_core::Result<Vec<_>>>()?;
    let preds = predict_samples(model, &samples, batch)?;
    Ok(rows(case, &times, &preds))
}

fn rows(case: &PreparedCase, times: &[usize], preds: &[f64]) -> Vec<PredRow> {
    times
        .iter()
        .zip(preds)
        .map(|(&t, &p)| PredRow {
            t: t + 1,
            pred: p,
            truth: case.bis[t + 1],
        })
        .collect()
}

/// One forward pass per second, as a monitor would run. Returns the rows and
/// the wall time of each step, window assembly included.
fn stream_case(model: &Model, case: &PreparedCase) -> Result<(Vec<PredRow>, Vec<f64>)> {
    let times: Vec<usize> = case.sample_times(1).collect();
    let mut preds = Vec::with_capacity(times.len());
    let mut lat = Vec::with_capacity(times.len());
    for &t in &times {
        let start = Instant::now();
        let sample: TrainingSample = case.sample(t, None)?;
        let p = predict_samples(model, std::slice::from_ref(&sample), 1)?;
        lat.push(start.elapsed().as_secs_f64());
        preds.push(p[0]);
    }
    Ok((rows(case, &times, &preds), lat))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)]
}

pub fn run(ctx: &Context, a: &Args) -> Result<()> {
    let s: Section = ctx.section("predict")?;
    let stride = pick(&a.stride, &s.stride, 1);
    let batch = pick(&a.batch, &s.batch, 256);
    let stream = a.stream || s.stream.unwrap_or(false);
    let limit = a.limit.or(s.limit);
    if stride == 0 || batch == 0 {
        return Err(failure::config("stride and batch must be positive"));
    }
    if stream && stride != 1 {
        return Err(failure::config("stream mode predicts every second; drop --stride"));
    }
    let model_path = ctx.path(&a.model, &s.model, "model/model.bin");
    fsio::require(&model_path, "model")?;
    let model = load_model(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let (dataset, raw) = if a.dataset.is_some() || a.raw.is_some() {
        (a.dataset.clone(), a.raw.clone())
    } else {
        (s.dataset.clone(), s.raw.clone())
    };
    let (input, from_raw, mut cases) = input_cases(ctx, dataset, raw, &model.norms)?;
    if let Some(n) = limit {
        cases.truncate(n);
    }
    let out = ctx.path(&a.out, &s.out, "predictions/model");
    let files = cases
        .iter()
        .map(|c| case_file(&out, &c.case_id))
        .collect::<Result<Vec<_>>>()?;
    fsio::create_dir(&out)?;

    if stream {
        let mut all = Vec::new();
        let mut per_step = Vec::new();
        for (case, file) in cases.iter().zip(&files) {
            let (r, lat) = stream_case(&model, case)?;
            write_predictions(file, &r)?;
            for (row, l) in r.iter().zip(&lat) {
                per_step.push((case.case_id.clone(), row.t, *l));
            }
            all.extend(lat);
        }
        if all.is_empty() {
            return Err(failure::data("no steps to stream"));
        }
        fsio::write_with(&out.join("latency.csv"), |w| {
            writeln!(w, "case_id,t,seconds")?;
            for (id, t, l) in &per_step {
                writeln!(w, "{id},{t},{l:.6}")?;
            }
            Ok(())
        })?;
        let mut sorted = all.clone();
        let med = median(&mut sorted);
        let lat = Latency {
            steps: all.len(),
            median_s: med,
            p95_s: quantile(&sorted, 0.95),
            max_s: *sorted.last().expect("non-empty"),
        };
        log::info!("median step latency {:.4} s over {} steps", lat.median_s, lat.steps);
        println!("median step latency {:.6} s, p95 {:.6} s", lat.median_s, lat.p95_s);
        fsio::write_json(&out.join("latency.json"), &lat)?;
    } else {
        cases.par_iter().zip(&files).try_for_each(|(case, file)| {
            write_predictions(file, &predict_case(&model, case, stride, batch)?)
        })?;
    }
    fsio::write_json(
        &out.join("effective_config.json"),
        &Effective {
            command: "predict",
            model: &model_path,
            input: &input,
            raw: from_raw,
            out: &out,
            stride,
            stream,
            limit,
            batch,
        },
    )?;
    log::info!("predicted {} cases into {}", cases.len(), out.display());
    Ok(())
}
