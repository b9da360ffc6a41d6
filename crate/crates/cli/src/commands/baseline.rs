use std::path::PathBuf;

use anyhow::Result;
use doa_core::datapipe::PreparedCase;
use doa_core::pkpd::pkpd_bis_per_second;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{case_file, load_dataset, load_raw_cases, norms_beside, write_predictions, PredRow};
use crate::config::{pick, Context};
use crate::{failure, fsio};

#[derive(clap::Args)]
pub struct Args {
    /// Ingested dataset file; its norms.json is needed to recover the rates
    /// [default: <data-dir>/dataset/test.bin].
    #[arg(long, conflicts_with = "raw")]
    dataset: Option<PathBuf>,
    /// Predict directly from a directory of case CSVs.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Output directory [default: <data-dir>/predictions/pkpd].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seconds between predictions [default: 1].
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Section {
    dataset: Option<PathBuf>,
    raw: Option<PathBuf>,
    out: Option<PathBuf>,
    stride: Option<usize>,
}

#[derive(Serialize)]
struct Effective<'a> {
    command: &'static str,
    input: &'a PathBuf,
    raw: bool,
    out: &'a PathBuf,
    stride: usize,
}

/// Covariate-model BIS at the same seconds a model would predict.
/// `per_s[k]` is the BIS at second `k + 1`.
fn case_rows(
    id: &str,
    patient: &doa_core::pkpd::Patient,
    ppf: &[f64],
    rftn: &[f64],
    bis: &[f64],
    times: impl Iterator<Item = usize>,
) -> Result<Vec<PredRow>> {
    let per_s = pkpd_bis_per_second(patient, ppf, rftn)?;
    times
        .map(|t| {
            let pred = *per_s
                .get(t)
                .ok_or_else(|| failure::data(format!("case {id}: no simulated BIS for second {}", t + 1)))?;
            Ok(PredRow {
                t: t + 1,
                pred,
                truth: bis[t + 1],
            })
        })
        .collect()
}

pub fn run(ctx: &Context, a: &Args) -> Result<()> {
    let s: Section = ctx.section("baseline")?;
    let stride = pick(&a.stride, &s.stride, 1);
    if stride == 0 {
        return Err(failure::config("stride must be positive"));
    }
    let out = ctx.path(&a.out, &s.out, "predictions/pkpd");
    let (dataset, raw) = if a.dataset.is_some() || a.raw.is_some() {
        (a.dataset.clone(), a.raw.clone())
    } else {
        (s.dataset.clone(), s.raw.clone())
    };

    let (input, from_raw, results): (PathBuf, bool, Vec<(String, Vec<PredRow>)>) = match raw {
        Some(dir) => {
            let cases = load_raw_cases(&dir)?;
            let r = cases
                .par_iter()
                .map(|(c, _)| {
                    let times = (c.t_induction_start..c.t_end).step_by(stride);
                    let rows = case_rows(&c.case_id, &c.patient, &c.ppf_rates(), &c.rftn_rates(), &c.bis, times)?;
                    Ok((c.case_id.clone(), rows))
                })
                .collect::<Result<Vec<_>>>()?;
            (dir, true, r)
        }
        None => {
            let path = dataset.unwrap_or_else(|| ctx.data_dir.join("dataset").join("test.bin"));
            let ds = load_dataset(&path)?;
            let norms = norms_beside(&path)?.ok_or_else(|| {
                failure::data(format!("{} needs a norms.json beside it", path.display()))
            })?;
            let r = ds
                .cases
                .par_iter()
                .map(|c: &PreparedCase| {
                    let ppf: Vec<f64> = c.ppf_rate.iter().map(|&z| norms.ppf_rate.invert(z).max(0.0)).collect();
                    let rftn: Vec<f64> = c.rftn_rate.iter().map(|&z| norms.rftn_rate.invert(z).max(0.0)).collect();
                    let rows = case_rows(&c.case_id, &c.patient, &ppf, &rftn, &c.bis, c.sample_times(stride))?;
                    Ok((c.case_id.clone(), rows))
                })
                .collect::<Result<Vec<_>>>()?;
            (path, false, r)
        }
    };

    let files = results
        .iter()
        .map(|(id, _)| case_file(&out, id))
        .collect::<Result<Vec<_>>>()?;
    fsio::create_dir(&out)?;
    results
        .par_iter()
        .zip(&files)
        .try_for_each(|((_, rows), f)| write_predictions(f, rows))?;
    fsio::write_json(
        &out.join("effective_config.json"),
        &Effective {
            command: "baseline-pkpd",
            input: &input,
            raw: from_raw,
            out: &out,
            stride,
        },
    )?;
    log::info!("wrote PK-PD predictions for {} cases", results.len());
    Ok(())
}
