use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use doa_core::datapipe::{
    assemble_datasets, bin_case, read_case_file, split_cases, CaseSeries, Norms, SplitManifest,
    DEFAULT_LOWESS_FRAC,
};
use doa_core::pkpd::pkpd_pseudo_bis;
use doa_core::Error as CoreError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{parse_split, pick, Context};
use crate::{failure, fsio};

const DEFAULT_SPLIT: &str = "0.6,0.2,0.2";
const DEFAULT_STRIDE: usize = 10;

#[derive(clap::Args)]
pub struct Args {
    /// Directory of case CSVs [default: <data-dir>/raw].
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Output directory [default: <data-dir>/dataset].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train, validation and test fractions [default: 0.6,0.2,0.2].
    #[arg(long)]
    split: Option<String>,
    /// JSON manifest with explicit train/val/test case ids; overrides --split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Seconds between consecutive training windows [default: 10].
    #[arg(long)]
    stride: Option<usize>,
    /// LOWESS span for training labels, as a fraction of each case [default: 0.03].
    #[arg(long)]
    lowess_frac: Option<f64>,
    /// Reuse these normalization constants instead of fitting new ones,
    /// e.g. the norms of a model that will be fine-tuned.
    #[arg(long)]
    norms: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Section {
    raw: Option<PathBuf>,
    out: Option<PathBuf>,
    split: Option<String>,
    manifest: Option<PathBuf>,
    stride: Option<usize>,
    lowess_frac: Option<f64>,
    norms: Option<PathBuf>,
}

#[derive(Serialize)]
struct Effective {
    command: &'static str,
    seed: u64,
    raw: PathBuf,
    out: PathBuf,
    split: Option<[f64; 3]>,
    manifest: Option<PathBuf>,
    stride: usize,
    lowess_frac: f64,
    norms: Option<PathBuf>,
}

#[derive(Serialize)]
struct Summary {
    files: usize,
    accepted: usize,
    rejected: usize,
    cases: [usize; 3],
    samples: [usize; 3],
}

struct Rejection {
    file: String,
    reason: String,
    detail: String,
}

/// Whether an error condemns only this file rather than the whole run.
fn is_case_level(e: &CoreError) -> bool {
    !matches!(e, CoreError::Io(_))
}

fn load(path: &Path) -> doa_core::Result<(CaseSeries, Vec<f64>)> {
    let series = bin_case(&read_case_file(path)?)?;
    let pseudo = pkpd_pseudo_bis(&series.patient, &series)?;
    Ok((series, pseudo))
}

pub fn run(ctx: &Context, a: &Args) -> Result<()> {
    let s: Section = ctx.section("ingest")?;
    let manifest_path = a.manifest.clone().or(s.manifest.clone());
    // Validate everything before any output exists.
    let split = match &manifest_path {
        Some(_) => None,
        None => Some(parse_split(&pick(&a.split, &s.split, DEFAULT_SPLIT.to_string()))?),
    };
    let stride = pick(&a.stride, &s.stride, DEFAULT_STRIDE);
    if stride == 0 {
        return Err(failure::config("stride must be positive"));
    }
    let lowess_frac = pick(&a.lowess_frac, &s.lowess_frac, DEFAULT_LOWESS_FRAC);
    if !(lowess_frac > 0.0 && lowess_frac <= 1.0) {
        return Err(failure::config(format!("LOWESS fraction {lowess_frac} must lie in (0, 1]")));
    }
    let raw = ctx.path(&a.raw, &s.raw, "raw");
    let out = ctx.path(&a.out, &s.out, "dataset");
    fsio::require(&raw, "raw directory")?;
    let manifest_in: Option<SplitManifest> = match &manifest_path {
        Some(p) => Some(fsio::read_json(p)?),
        None => None,
    };
    let norms_path = a.norms.clone().or(s.norms.clone());
    let fixed: Option<Norms> = match &norms_path {
        Some(p) => Some(fsio::read_json(p)?),
        None => None,
    };

    let files = fsio::list_csv(&raw)?;
    let loaded: Vec<_> = files.par_iter().map(|f| load(f)).collect();
    let mut cases = Vec::new();
    let mut rejected = Vec::new();
    for (f, r) in files.iter().zip(loaded) {
        match r {
            Ok(c) => cases.push(c),
            Err(e) if is_case_level(&e) => {
                let reason = match &e {
                    CoreError::RejectedCase { reason, .. } => reason.to_string(),
                    _ => "unusable".to_string(),
                };
                rejected.push(Rejection {
                    file: f.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                    reason,
                    detail: e.to_string(),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    for (c, _) in &cases {
        super::case_file(&out, &c.case_id)?;
    }
    if cases.is_empty() {
        return Err(failure::data(format!(
            "no usable cases among {} files in {}",
            files.len(),
            raw.display()
        )));
    }

    let ids: Vec<String> = cases.iter().map(|(c, _)| c.case_id.clone()).collect();
    let manifest = match (manifest_in, split) {
        (Some(m), _) => {
            if !m.is_disjoint() {
                return Err(failure::config("manifest splits overlap"));
            }
            m
        }
        (None, Some(f)) => split_cases(&ids, f, ctx.seed)?,
        (None, None) => unreachable!("split is parsed whenever no manifest is given"),
    };
    let a_sets = assemble_datasets(&cases, &manifest, lowess_frac, stride, fixed.as_ref())?;

    fsio::create_dir(&out)?;
    for (name, d) in [("train", &a_sets.train), ("val", &a_sets.val), ("test", &a_sets.test)] {
        fsio::write_atomic(&out.join(format!("{name}.bin")), &d.to_bytes())?;
    }
    fsio::write_json(&out.join("norms.json"), &a_sets.norms)?;
    fsio::write_json(&out.join("splits.json"), &manifest)?;
    fsio::write_with(&out.join("rejected.csv"), |w| {
        writeln!(w, "file,reason,detail")?;
        for r in &rejected {
            writeln!(w, "{},{},\"{}\"", r.file, r.reason, r.detail.replace('"', "'"))?;
        }
        Ok(())
    })?;
    let summary = Summary {
        files: files.len(),
        accepted: cases.len(),
        rejected: rejected.len(),
        cases: [a_sets.train.cases.len(), a_sets.val.cases.len(), a_sets.test.cases.len()],
        samples: [a_sets.train.len(), a_sets.val.len(), a_sets.test.len()],
    };
    fsio::write_json(&out.join("summary.json"), &summary)?;
    fsio::write_json(
        &out.join("effective_config.json"),
        &Effective {
            command: "ingest",
            seed: ctx.seed,
            raw,
            out: out.clone(),
            split,
            manifest: manifest_path,
            stride,
            lowess_frac,
            norms: norms_path,
        },
    )?;
    if !rejected.is_empty() {
        log::warn!("{} of {} files rejected; see rejected.csv", rejected.len(), files.len());
    }
    log::info!(
        "ingested {} cases ({} / {} / {} samples)",
        cases.len(),
        summary.samples[0],
        summary.samples[1],
        summary.samples[2]
    );
    Ok(())
}
