use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use doa_core::datapipe::BIN_S;
use doa_core::imbalance::{smooth_density, weights_from_density, write_weight_csv, DEFAULT_SIGMA, DEFAULT_W_CAP};
use doa_core::metrics::{binned_test_error, write_binned_csv};
use serde::{Deserialize, Serialize};

use super::evaluate::collect;
use super::{case_file, load_dataset, resolve_methods};
use crate::config::Context;
use crate::fsio;

#[derive(clap::Args)]
pub struct Args {
    /// Dataset whose cases are plotted [default: <data-dir>/dataset/test.bin].
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Training dataset for the label distribution [default: <data-dir>/dataset/train.bin].
    #[arg(long)]
    train: Option<PathBuf>,
    /// Prediction set as name=directory; repeatable.
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Output directory [default: <data-dir>/plots].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Section {
    dataset: Option<PathBuf>,
    train: Option<PathBuf>,
    methods: Option<Vec<String>>,
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Effective<'a> {
    command: &'static str,
    dataset: &'a PathBuf,
    train: &'a PathBuf,
    methods: &'a [(String, PathBuf)],
    out: &'a PathBuf,
}

pub fn run(ctx: &Context, a: &Args) -> Result<()> {
    let s: Section = ctx.section("plot")?;
    let specs = if a.methods.is_empty() {
        s.methods.clone().unwrap_or_default()
    } else {
        a.methods.clone()
    };
    let methods = resolve_methods(ctx, &specs)?;
    let dataset = ctx.path(&a.dataset, &s.dataset, "dataset/test.bin");
    let train = ctx.path(&a.train, &s.train, "dataset/train.bin");
    let out = ctx.path(&a.out, &s.out, "plots");
    let ds = load_dataset(&dataset)?;
    let preds = methods
        .iter()
        .map(|(n, d)| collect(n, d, &ds.cases))
        .collect::<Result<Vec<_>>>()?;

    let series = out.join("series");
    fsio::create_dir(&series)?;
    for (k, c) in ds.cases.iter().enumerate() {
        let mut by_t: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
        for (j, mp) in preds.iter().enumerate() {
            for &(t, p, _) in &mp.cases[k] {
                by_t.entry(t).or_insert_with(|| vec![None; preds.len()])[j] = Some(p);
            }
        }
        fsio::write_with(&case_file(&series, &c.case_id)?, |w| {
            let names: Vec<&str> = preds.iter().map(|p| p.name.as_str()).collect();
            writeln!(w, "t,truth,pseudo,{}", names.join(","))?;
            for (t, row) in &by_t {
                let pseudo = c.pseudo_raw[(t / BIN_S).min(c.pseudo_raw.len() - 1)];
                let cells: Vec<String> = row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
                writeln!(w, "{t},{},{pseudo},{}", c.bis[*t], cells.join(","))?;
            }
            Ok(())
        })?;
    }

    for mp in &preds {
        let (p, y) = mp.pooled();
        fsio::write_with(&out.join(format!("scatter_{}.csv", mp.name)), |w| {
            writeln!(w, "truth,pred")?;
            for (a, b) in y.iter().zip(&p) {
                writeln!(w, "{a},{b}")?;
            }
            Ok(())
        })?;
        fsio::write_with(&out.join(format!("binned_{}.csv", mp.name)), |w| {
            Ok(write_binned_csv(w, &binned_test_error(&p, &y))?)
        })?;
    }

    if train.exists() {
        let targets = load_dataset(&train)?.targets();
        let radius = (2.0 * DEFAULT_SIGMA).round() as usize;
        let density = smooth_density(&targets, DEFAULT_SIGMA, radius)?;
        let table = weights_from_density(&density, DEFAULT_W_CAP)?;
        fsio::write_with(&out.join("label_distribution.csv"), |w| {
            Ok(write_weight_csv(w, &density, &table)?)
        })?;
    } else {
        log::warn!("{} not found; skipping the label distribution", train.display());
    }
    fsio::write_json(
        &out.join("effective_config.json"),
        &Effective {
            command: "plot-data",
            dataset: &dataset,
            train: &train,
            methods: &methods,
            out: &out,
        },
    )?;
    Ok(())
}
