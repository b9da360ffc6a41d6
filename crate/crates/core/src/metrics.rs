//! Clinical evaluation: performance errors per anesthesia period, Lin's
//! concordance, binned test error and BIS mutation statistics.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::CaseSeries;
use crate::error::{Error, Result};
use crate::imbalance::NUM_BINS;

pub const INDUCTION_S: usize = 600;
/// Two-sided 95% standard normal quantile.
pub const Z_975: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Period {
    Induction,
    Maintenance,
    Recovery,
}

impl Period {
    pub const ALL: [Period; 3] = [Period::Induction, Period::Maintenance, Period::Recovery];

    pub fn name(self) -> &'static str {
        match self {
            Period::Induction => "induction",
            Period::Maintenance => "maintenance",
            Period::Recovery => "recovery",
        }
    }
}

/// Half-open induction and maintenance intervals and a closed recovery
/// interval, in seconds from the start of the record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodSplit {
    pub induction: (usize, usize),
    pub maintenance: (usize, usize),
    pub recovery: (usize, usize),
    /// Set when propofol stops within the induction window.
    pub maintenance_empty: bool,
}

impl PeriodSplit {
    pub fn from_anchors(t0: usize, t_stop: usize, t_end: usize) -> Result<Self> {
        if t_stop < t0 {
            return Err(Error::MissingAnchor(format!(
                "propofol stop {t_stop} precedes induction start {t0}"
            )));
        }
        if t_end < t_stop {
            return Err(Error::MissingAnchor(format!(
                "record end {t_end} precedes propofol stop {t_stop}"
            )));
        }
        let ind_end = (t0 + INDUCTION_S).min(t_stop);
        Ok(Self {
            induction: (t0, ind_end),
            maintenance: (ind_end, t_stop),
            recovery: (t_stop, t_end),
            maintenance_empty: ind_end == t_stop,
        })
    }

    pub fn period_of(&self, t: usize) -> Option<Period> {
        if t >= self.induction.0 && t < self.induction.1 {
            Some(Period::Induction)
        } else if t >= self.maintenance.0 && t < self.maintenance.1 {
            Some(Period::Maintenance)
        } else if t >= self.recovery.0 && t <= self.recovery.1 {
            Some(Period::Recovery)
        } else {
            None
        }
    }
}

pub fn split_periods(case: &CaseSeries) -> Result<PeriodSplit> {
    PeriodSplit::from_anchors(case.t_induction_start, case.t_propofol_stop, case.t_end)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mdpe: f64,
    pub mdape: f64,
    pub rmse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub overall: ErrorStats,
    pub induction: Option<ErrorStats>,
    pub maintenance: Option<ErrorStats>,
    pub recovery: Option<ErrorStats>,
}

impl CaseMetrics {
    pub fn period(&self, p: Option<Period>) -> Option<&ErrorStats> {
        match p {
            None => Some(&self.overall),
            Some(Period::Induction) => self.induction.as_ref(),
            Some(Period::Maintenance) => self.maintenance.as_ref(),
            Some(Period::Recovery) => self.recovery.as_ref(),
        }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// MDPE, MDAPE (percent) and RMSE of aligned series.
pub fn error_stats(pred: &[f64], truth: &[f64]) -> Result<ErrorStats> {
    if pred.len() != truth.len() {
        return Err(Error::MisalignedSeries(format!(
            "{} predictions vs {} true values",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::MisalignedSeries("empty series".into()));
    }
    let mut pe = Vec::with_capacity(pred.len());
    for (i, (p, y)) in pred.iter().zip(truth).enumerate() {
        if *y == 0.0 {
            return Err(Error::ZeroTrueValue(i));
        }
        pe.push(100.0 * (p - y) / y);
    }
    let mut ape: Vec<f64> = pe.iter().map(|v| v.abs()).collect();
    let mse = pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64;
    Ok(ErrorStats {
        mdpe: median(&mut pe),
        mdape: median(&mut ape),
        rmse: mse.sqrt(),
        n: pred.len(),
    })
}

/// Per-period and overall statistics. `times` gives the second each pair
/// belongs to; pairs outside the split are ignored by the period rows but
/// counted overall.
pub fn case_metrics(times: &[usize], pred: &[f64], truth: &[f64], split: &PeriodSplit) -> Result<CaseMetrics> {
    if times.len() != pred.len() {
        return Err(Error::MisalignedSeries(format!(
            "{} times vs {} predictions",
            times.len(),
            pred.len()
        )));
    }
    let overall = error_stats(pred, truth)?;
    let mut per = [(); 3].map(|_| (Vec::new(), Vec::new()));
    for ((&t, &p), &y) in times.iter().zip(pred).zip(truth) {
        if let Some(period) = split.period_of(t) {
            let slot = &mut per[period as usize];
            slot.0.push(p);
            slot.1.push(y);
        }
    }
    let [ind, mnt, rec] = per.map(|(p, y)| if p.is_empty() { None } else { Some(error_stats(&p, &y)) });
    Ok(CaseMetrics {
        overall,
        induction: ind.transpose()?,
        maintenance: mnt.transpose()?,
        recovery: rec.transpose()?,
    })
}

/// Mean, sample standard deviation and range over cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary {
        mean,
        sd,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ccc {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

fn moments(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    (mx, my, vx / n, vy / n, cxy / n)
}

fn ccc_value(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::MisalignedSeries(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::DegenerateSeries(format!("{} points, need 3", x.len())));
    }
    let (mx, my, vx, vy, cxy) = moments(x, y);
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::DegenerateSeries("zero variance".into()));
    }
    Ok(2.0 * cxy / (vx + vy + (mx - my) * (mx - my)))
}

/// Lin's concordance with a Fisher-z 95% interval.
pub fn ccc(pred: &[f64], truth: &[f64]) -> Result<Ccc> {
    let value = ccc_value(pred, truth)?;
    let z = value.atanh();
    let half = Z_975 / ((pred.len() as f64 - 3.0).sqrt());
    Ok(Ccc {
        value,
        lower: (z - half).tanh(),
        upper: (z + half).tanh(),
    })
}

/// Percentile bootstrap 95% interval of the concordance.
pub fn ccc_bootstrap(pred: &[f64], truth: &[f64], resamples: usize, seed: u64) -> Result<(f64, f64)> {
    ccc_value(pred, truth)?;
    let n = pred.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(resamples);
    let (mut xs, mut ys) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..resamples {
        for k in 0..n {
            let i = rng.random_range(0..n);
            xs[k] = pred[i];
            ys[k] = truth[i];
        }
        if let Ok(v) = ccc_value(&xs, &ys) {
            vals.push(v);
        }
    }
    if vals.is_empty() {
        return Err(Error::DegenerateSeries("every resample was constant".into()));
    }
    vals.sort_by(f64::total_cmp);
    let q = |p: f64| vals[((p * (vals.len() - 1) as f64).round() as usize).min(vals.len() - 1)];
    Ok((q(0.025), q(0.975)))
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (_, _, vx, vy, cxy) = moments(x, y);
    cxy / (vx * vy).sqrt()
}

/// Absolute mean signed error per integer BIS bin of the true value; `None`
/// for bins without points.
pub fn binned_test_error(pred: &[f64], truth: &[f64]) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; NUM_BINS];
    let mut count = vec![0usize; NUM_BINS];
    for (p, y) in pred.iter().zip(truth) {
        let j = y.round().clamp(0.0, 100.0) as usize;
        sum[j] += p - y;
        count[j] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| (c > 0).then(|| (s / c as f64).abs()))
        .collect()
}

/// BIS regions used to attribute mutation points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Below31,
    Many,
    MediumLow,
    MediumHigh,
    Few,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Below31,
        Region::Many,
        Region::MediumLow,
        Region::MediumHigh,
        Region::Few,
    ];

    pub fn of(bis: f64) -> Region {
        match bis.round() {
            b if b < 31.0 => Region::Below31,
            b if b < 48.0 => Region::Many,
            b if b < 54.0 => Region::MediumLow,
            b if b < 64.0 => Region::MediumHigh,
            _ => Region::Few,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Region::Below31 => "[0,31)",
            Region::Many => "[31,48)",
            Region::MediumLow => "[48,54)",
            Region::MediumHigh => "[54,64)",
            Region::Few => "[64,100]",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationStats {
    pub points: usize,
    pub mutations: usize,
    /// Share of mutations per region, in `Region::ALL` order.
    pub fractions: [f64; 5],
}

/// Mutation points of a per-second series. The window around `t` is the
/// open interval `(t - half_window_s - 1, t + half_window_s + 1)`, clipped to
/// the series; a 30 s window therefore uses `half_window_s = 29`.
pub fn mutation_stats(bis: &[f64], m: f64, half_window_s: usize) -> Result<MutationStats> {
    let window = 2 * half_window_s + 1;
    if window > bis.len() {
        return Err(Error::WindowExceedsSeries {
            window,
            len: bis.len(),
        });
    }
    if !(m > 0.0) {
        return Err(Error::Config(format!("mutation magnitude {m} must be positive")));
    }
    let mut counts = [0usize; 5];
    for (t, &b) in bis.iter().enumerate() {
        let lo = t.saturating_sub(half_window_s);
        let hi = (t + half_window_s + 1).min(bis.len());
        let w = &bis[lo..hi];
        let wmin = w.iter().copied().fold(f64::INFINITY, f64::min);
        let wmax = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if (b - wmin).abs() > m || (b - wmax).abs() > m {
            counts[Region::of(b) as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    Ok(MutationStats {
        points: bis.len(),
        mutations: total,
        fractions: counts.map(|c| if total > 0 { c as f64 / total as f64 } else { 0.0 }),
    })
}

/// One evaluated case for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub method: String,
    pub metrics: CaseMetrics,
}

const PERIOD_ROWS: [(&str, Option<Period>); 4] = [
    ("All", None),
    ("Induction", Some(Period::Induction)),
    ("Maintenance", Some(Period::Maintenance)),
    ("Recovery", Some(Period::Recovery)),
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per case, method and period.
pub fn write_case_csv<W: Write>(out: &mut W, reports: &[CaseReport]) -> Result<()> {
    writeln!(out, "case_id,method,period,n,mdpe,mdape,rmse")?;
    for r in reports {
        for (name, p) in PERIOD_ROWS {
            match r.metrics.period(p) {
                Some(s) => writeln!(
                    out,
                    "{},{},{},{},{:.6},{:.6},{:.6}",
                    r.case_id,
                    r.method,
                    name.to_lowercase(),
                    s.n,
                    s.mdpe,
                    s.mdape,
                    s.rmse
                )?,
                None => writeln!(out, "{},{},{},0,,,", r.case_id, r.method, name.to_lowercase())?,
            }
        }
    }
    Ok(())
}

/// Cohort summary with periods as rows and metric × method as columns; each
/// cell is `mean ± sd` over cases.
pub fn write_summary_csv<W: Write>(out: &mut W, reports: &[CaseReport], methods: &[&str]) -> Result<()> {
    let metric_names = ["MDPE(%)", "MDAPE(%)", "RMSE"];
    let mut header = vec!["period".to_string()];
    for m in metric_names {
        for meth in methods {
            header.push(format!("{m} {meth}"));
        }
    }
    writeln!(out, "{}", header.join(","))?;
    for (name, p) in PERIOD_ROWS {
        let mut row = vec![name.to_string()];
        for k in 0..3 {
            for meth in methods {
                let vals: Vec<f64> = reports
                    .iter()
                    .filter(|r| r.method == *meth)
                    .filter_map(|r| r.metrics.period(p))
                    .map(|s| [s.mdpe, s.mdape, s.rmse][k])
                    .collect();
                row.push(match summarize(&vals) {
                    Some(s) => format!("{:.2} ± {:.2}", s.mean, s.sd),
                    None => String::new(),
                });
            }
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_binned_csv<W: Write>(out: &mut W, binned: &[Option<f64>]) -> Result<()> {
    writeln!(out, "bin,error")?;
    for (j, e) in binned.iter().enumerate() {
        writeln!(out, "{j},{}", fmt_opt(*e))?;
    }
    Ok(())
}
