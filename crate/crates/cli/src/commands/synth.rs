use std::path::PathBuf;

use anyhow::Result;
use doa_core::datapipe::write_case_csv;
use doa_core::pkpd::Sex;
use doa_core::synth::{generate_case, Perturbation, SynthConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::case_file;
use crate::config::{pick, Context};
use crate::fsio;

#[derive(clap::Args)]
pub struct Args {
    /// Number of cases.
    #[arg(long)]
    cases: Option<usize>,
    /// Shortest record in seconds.
    #[arg(long)]
    min_duration: Option<usize>,
    /// Longest record in seconds.
    #[arg(long)]
    max_duration: Option<usize>,
    /// Standard deviation of the additive BIS noise.
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Simulate ground truth with the covariate-derived parameters.
    #[arg(long)]
    no_perturb: bool,
    /// Output directory [default: <data-dir>/raw].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Section {
    cases: Option<usize>,
    min_duration: Option<usize>,
    max_duration: Option<usize>,
    noise_sd: Option<f64>,
    perturb: Option<bool>,
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Effective<'a> {
    command: &'static str,
    out: &'a PathBuf,
    config: &'a SynthConfig,
}

#[derive(Serialize)]
struct CaseInfo {
    case_id: String,
    age: u32,
    sex: &'static str,
    weight_kg: f64,
    height_cm: f64,
    duration_s: usize,
    perturbation: Perturbation,
}

pub fn run(ctx: &Context, a: &Args) -> Result<()> {
    let s: Section = ctx.section("synth")?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_cases: pick(&a.cases, &s.cases, d.n_cases),
        duration_s: (
            pick(&a.min_duration, &s.min_duration, d.duration_s.0),
            pick(&a.max_duration, &s.max_duration, d.duration_s.1),
        ),
        seed: ctx.seed,
        noise_sd: pick(&a.noise_sd, &s.noise_sd, d.noise_sd),
        perturb: if a.no_perturb { false } else { s.perturb.unwrap_or(d.perturb) },
        ..d
    };
    cfg.validate()?;
    let out = ctx.path(&a.out, &s.out, "raw");

    let cases = (0..cfg.n_cases)
        .into_par_iter()
        .map(|i| generate_case(&cfg, i))
        .collect::<doa_core::Result<Vec<_>>>()?;
    fsio::create_dir(&out)?;
    cases.par_iter().try_for_each(|c| {
        fsio::write_with(&case_file(&out, &c.raw.case_id)?, |w| Ok(write_case_csv(w, &c.raw)?))
    })?;
    let info: Vec<CaseInfo> = cases
        .iter()
        .map(|c| CaseInfo {
            case_id: c.raw.case_id.clone(),
            age: c.raw.patient.age,
            sex: match c.raw.patient.sex {
                Sex::Male => "M",
                Sex::Female => "F",
            },
            weight_kg: c.raw.patient.weight_kg,
            height_cm: c.raw.patient.height_cm,
            duration_s: c.raw.bis.len(),
            perturbation: c.perturbation,
        })
        .collect();
    fsio::write_json(&out.join("cases.json"), &info)?;
    fsio::write_json(
        &out.join("effective_config.json"),
        &Effective {
            command: "synth",
            out: &out,
            config: &cfg,
        },
    )?;
    log::info!("wrote {} cases to {}", cases.len(), out.display());
    Ok(())
}
