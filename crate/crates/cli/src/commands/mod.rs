pub mod baseline;
pub mod evaluate;
pub mod ingest;
pub mod plot;
pub mod predict;
pub mod synth;
pub mod train;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use doa_core::datapipe::{bin_case, read_case_file, CaseSeries, Dataset, Norms};
use doa_core::pkpd::pkpd_pseudo_bis;
use rayon::prelude::*;

use crate::config::Context;
use crate::failure;
use crate::fsio;

/// One predicted second: `t` is the second being predicted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredRow {
    pub t: usize,
    pub pred: f64,
    pub truth: f64,
}

pub fn write_predictions(path: &Path, rows: &[PredRow]) -> Result<()> {
    fsio::write_with(path, |w| {
        writeln!(w, "t,pred,truth")?;
        for r in rows {
            writeln!(w, "{},{},{}", r.t, r.pred, r.truth)?;
        }
        Ok(())
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("t,pred,truth") {
        return Err(failure::data(format!("{} lacks the t,pred,truth header", path.display())));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || failure::data(format!("{} line {}: cannot parse {line:?}", path.display(), i + 2));
        let mut f = line.split(',');
        let (Some(t), Some(p), Some(y), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad());
        };
        let row = PredRow {
            t: t.trim().parse().map_err(|_| bad())?,
            pred: p.trim().parse().map_err(|_| bad())?,
            truth: y.trim().parse().map_err(|_| bad())?,
        };
        if !row.pred.is_finite() || !row.truth.is_finite() {
            return Err(bad());
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Case ids become file names, so they may not address other directories.
pub fn case_file(dir: &Path, case_id: &str) -> Result<PathBuf> {
    if case_id.is_empty() || case_id.starts_with('.') || case_id.contains(['/', '\\']) {
        return Err(failure::data(format!("case id {case_id:?} cannot be used as a file name")));
    }
    Ok(dir.join(format!("{case_id}.csv")))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    fsio::require(path, "dataset")?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Dataset::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// `norms.json` stored next to a dataset file, if any.
pub fn norms_beside(dataset: &Path) -> Result<Option<Norms>> {
    let p = dataset.with_file_name("norms.json");
    if p.exists() {
        Ok(Some(fsio::read_json(&p)?))
    } else {
        Ok(None)
    }
}

/// Parses, bins and simulates every raw case. Any unusable file is an error.
pub fn load_raw_cases(dir: &Path) -> Result<Vec<(CaseSeries, Vec<f64>)>> {
    fsio::require(dir, "raw directory")?;
    let files = fsio::list_csv(dir)?;
    if files.is_empty() {
        return Err(failure::data(format!("no case CSVs in {}", dir.display())));
    }
    files
        .par_iter()
        .map(|f| {
            let series = bin_case(&read_case_file(f)?)?;
            let pseudo = pkpd_pseudo_bis(&series.patient, &series)?;
            Ok((series, pseudo))
        })
        .collect::<doa_core::Result<Vec<_>>>()
        .map_err(Into::into)
}

/// Methods to compare: explicit `name=dir` specs, else the default
/// prediction directories that exist.
pub fn resolve_methods(ctx: &Context, specs: &[String]) -> Result<Vec<(String, PathBuf)>> {
    let methods: Vec<(String, PathBuf)> = if specs.is_empty() {
        ["model", "pkpd"]
            .iter()
            .map(|m| (m.to_string(), ctx.data_dir.join("predictions").join(m)))
            .filter(|(_, d)| d.is_dir())
            .collect()
    } else {
        specs.iter().map(|s| crate::config::parse_method(s)).collect::<Result<_>>()?
    };
    if methods.is_empty() {
        return Err(failure::config("no prediction directories to evaluate; pass --method name=dir"));
    }
    let mut seen = BTreeMap::new();
    for (name, dir) in &methods {
        if seen.insert(name.clone(), ()).is_some() {
            return Err(failure::config(format!("method {name} given twice")));
        }
        fsio::require(dir, &format!("prediction directory for {name}"))?;
    }
    Ok(methods)
}
