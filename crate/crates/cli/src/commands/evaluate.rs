use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use doa_core::datapipe::PreparedCase;
use doa_core::metrics::{
    binned_test_error, case_metrics, ccc, ccc_bootstrap, mutation_stats, pearson, write_binned_csv,
    write_case_csv, write_summary_csv, CaseReport, PeriodSplit, Region,
};
use serde::{Deserialize, Serialize};

use super::{case_file, load_dataset, read_predictions, resolve_methods};
use crate::config::{pick, Context};
use crate::{failure, fsio};

/// Paired predictions of one method.
pub struct MethodPreds {
    pub name: String,
    /// Per case, in dataset order: `(t, pred, truth)` with truth from the dataset.
    pub cases: Vec<Vec<(usize, f64, f64)>>,
}

impl MethodPreds {
    pub fn pooled(&self) -> (Vec<f64>, Vec<f64>) {
        self.cases.iter().flatten().map(|&(_, p, y)| (p, y)).unzip()
    }
}

/// Reads every case's prediction file of a method and pairs it with the
/// dataset's labels. A missing case or a second past the record is an error.
pub fn collect(name: &str, dir: &std::path::Path, cases: &[PreparedCase]) -> Result<MethodPreds> {
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let file = case_file(dir, &c.case_id)?;
        if !file.exists() {
            return Err(failure::data(format!("method {name} has no predictions for case {}", c.case_id)));
        }
        let mut rows = Vec::new();
        for r in read_predictions(&file)? {
            let Some(&y) = c.bis.get(r.t) else {
                return Err(failure::data(format!(
                    "method {name}, case {}: second {} is past the record",
                    c.case_id, r.t
                )));
            };
            rows.push((r.t, r.pred, y));
        }
        if rows.is_empty() {
            return Err(failure::data(format!("method {name}, case {}: empty prediction file", c.case_id)));
        }
        out.push(rows);
    }
    Ok(MethodPreds {
        name: name.to_string(),
        cases: out,
    })
}

#[derive(clap::Args)]
pub struct Args {
    /// Dataset whose cases are scored [default: <data-dir>/dataset/test.bin].
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Prediction set as name=directory; repeat to compare methods
    /// [default: model and pkpd under <data-dir>/predictions when present].
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Output directory [default: <data-dir>/reports].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also compute a percentile-bootstrap concordance interval with this many resamples.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// BIS change that marks a mutation point [default: 10].
    #[arg(long)]
    mutation_m: Option<f64>,
    /// Seconds on either side of a point in the mutation window [default: 29].
    #[arg(long)]
    mutation_half_window: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct Section {
    dataset: Option<PathBuf>,
    methods: Option<Vec<String>>,
    out: Option<PathBuf>,
    bootstrap: Option<usize>,
    mutation_m: Option<f64>,
    mutation_half_window: Option<usize>,
}

#[derive(Serialize)]
struct Effective<'a> {
    command: &'static str,
    seed: u64,
    dataset: &'a PathBuf,
    methods: &'a [(String, PathBuf)],
    out: &'a PathBuf,
    bootstrap: usize,
    mutation_m: f64,
    mutation_half_window: usize,
}

pub fn run(ctx: &Context, a: &Args) -> Result<()> {
    let s: Section = ctx.section("evaluate")?;
    let specs = if a.methods.is_empty() {
        s.methods.clone().unwrap_or_default()
    } else {
        a.methods.clone()
    };
    let methods = resolve_methods(ctx, &specs)?;
    let bootstrap = pick(&a.bootstrap, &s.bootstrap, 0);
    let m = pick(&a.mutation_m, &s.mutation_m, 10.0);
    let half = pick(&a.mutation_half_window, &s.mutation_half_window, 29);
    if !(m > 0.0) {
        return Err(failure::config(format!("mutation magnitude {m} must be positive")));
    }
    let dataset = ctx.path(&a.dataset, &s.dataset, "dataset/test.bin");
    let out = ctx.path(&a.out, &s.out, "reports");
    let ds = load_dataset(&dataset)?;
    if ds.cases.is_empty() {
        return Err(failure::data(format!("{} holds no cases", dataset.display())));
    }

    let preds = methods
        .iter()
        .map(|(n, d)| collect(n, d, &ds.cases))
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::new();
    let mut dropped = 0usize;
    for mp in &preds {
        for (c, rows) in ds.cases.iter().zip(&mp.cases) {
            let split = PeriodSplit::from_anchors(c.t_induction_start, c.t_propofol_stop, c.t_end)?;
            // Percentage errors are undefined at a true value of zero.
            let kept: Vec<_> = rows.iter().filter(|r| r.2 != 0.0).collect();
            dropped += rows.len() - kept.len();
            let times: Vec<usize> = kept.iter().map(|r| r.0).collect();
            let p: Vec<f64> = kept.iter().map(|r| r.1).collect();
            let y: Vec<f64> = kept.iter().map(|r| r.2).collect();
            reports.push(CaseReport {
                case_id: c.case_id.clone(),
                method: mp.name.clone(),
                metrics: case_metrics(&times, &p, &y, &split)?,
            });
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} points with a true BIS of 0 left out of the percentage errors");
    }

    fsio::create_dir(&out)?;
    fsio::write_with(&out.join("cases.csv"), |w| Ok(write_case_csv(w, &reports)?))?;
    let names: Vec<&str> = preds.iter().map(|p| p.name.as_str()).collect();
    fsio::write_with(&out.join("summary.csv"), |w| Ok(write_summary_csv(w, &reports, &names)?))?;
    for mp in &preds {
        let (p, y) = mp.pooled();
        fsio::write_with(&out.join(format!("binned_{}.csv", mp.name)), |w| {
            Ok(write_binned_csv(w, &binned_test_error(&p, &y))?)
        })?;
    }
    fsio::write_with(&out.join("ccc.csv"), |w| {
        writeln!(w, "method,n,ccc,lower,upper,boot_lower,boot_upper,pearson")?;
        for (k, mp) in preds.iter().enumerate() {
            let (p, y) = mp.pooled();
            let c = ccc(&p, &y)?;
            let boot = if bootstrap > 0 {
                let (lo, hi) = ccc_bootstrap(&p, &y, bootstrap, ctx.seed.wrapping_add(k as u64))?;
                (format!("{lo:.6}"), format!("{hi:.6}"))
            } else {
                Default::default()
            };
            writeln!(
                w,
                "{},{},{:.6},{:.6},{:.6},{},{},{:.6}",
                mp.name,
                p.len(),
                c.value,
                c.lower,
                c.upper,
                boot.0,
                boot.1,
                pearson(&p, &y)
            )?;
        }
        Ok(())
    })?;

    // Label shares and mutation shares per region, over the true per-second series.
    let mut labels = [0usize; 5];
    let mut mutations = [0.0f64; 5];
    for c in &ds.cases {
        for &b in &c.bis {
            labels[Region::of(b) as usize] += 1;
        }
        let ms = mutation_stats(&c.bis, m, half)?;
        for (acc, f) in mutations.iter_mut().zip(ms.fractions) {
            *acc += f * ms.mutations as f64;
        }
    }
    let n_labels: usize = labels.iter().sum();
    let n_mut: f64 = mutations.iter().sum();
    fsio::write_with(&out.join("regions.csv"), |w| {
        writeln!(w, "region,label_count,label_fraction,mutations,mutation_fraction")?;
        for r in Region::ALL {
            let i = r as usize;
            writeln!(
                w,
                "{},{},{:.6},{},{:.6}",
                r.label(),
                labels[i],
                labels[i] as f64 / n_labels as f64,
                mutations[i].round(),
                if n_mut > 0.0 { mutations[i] / n_mut } else { 0.0 }
            )?;
        }
        Ok(())
    })?;
    fsio::write_json(
        &out.join("effective_config.json"),
        &Effective {
            command: "evaluate",
            seed: ctx.seed,
            dataset: &dataset,
            methods: &methods,
            out: &out,
            bootstrap,
            mutation_m: m,
            mutation_half_window: half,
        },
    )?;
    log::info!("evaluated {} methods on {} cases", preds.len(), ds.cases.len());
    Ok(())
}
