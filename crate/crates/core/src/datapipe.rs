//! Case ingestion: CSV parsing and cleaning, 10 s binning, label smoothing,
//! normalization and the windowed samples fed to the network.
//!
//! # Case file layout
//!
//! ```text
//! # case_id=synth-0007
//! # age=54,sex=F,weight=62.3,height=161.0
//! t,ppf_dose,rftn_dose,bis
//! 0,0,0,97.1
//! 1,0,0,
//! 2,180,0.4,96.8
//! ```
//!
//! Comment lines before the header carry `key=value` pairs separated by
//! commas; `case_id`, `age`, `sex` (`M`/`F`), `weight` (kg) and `height` (cm)
//! are required. Each row holds an integer timestamp in seconds, the propofol
//! and remifentanil doses given during that second in µg, and the BIS reading.
//! An empty field is a missing value. Timestamps must increase strictly;
//! skipped seconds count as missing rows.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, RejectReason, Result};
use crate::imbalance::WeightTable;
use crate::pkpd::{Patient, PdParams, Sex};

pub const BIN_S: usize = 10;
pub const WINDOW_BINS: usize = 180;
/// Longest run of missing or invalid seconds that is still interpolated.
pub const MAX_GAP_S: usize = 30;
pub const DEFAULT_LOWESS_FRAC: f64 = 0.03;

/// A cleaned per-second record. Index `i` of every series is second
/// `start_s + i` of the original file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCase {
    pub case_id: String,
    pub patient: Patient,
    pub start_s: i64,
    pub ppf_dose: Vec<f64>,
    pub rftn_dose: Vec<f64>,
    pub bis: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub ppf_dose: f64,
    pub rftn_dose: f64,
    pub ppf_rate: f64,
    pub rftn_rate: f64,
}

/// Anchors are seconds from the start of the record.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSeries {
    pub case_id: String,
    pub patient: Patient,
    pub start_s: i64,
    pub bins: Vec<Bin>,
    pub bis: Vec<f64>,
    pub t_induction_start: usize,
    pub t_propofol_stop: usize,
    pub t_end: usize,
}

impl CaseSeries {
    pub fn ppf_rates(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.ppf_rate).collect()
    }

    pub fn rftn_rates(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.rftn_rate).collect()
    }
}

fn reject(case_id: &str, reason: RejectReason, detail: String) -> Error {
    log::warn!("rejecting case {case_id} as {reason}: {detail}");
    Error::RejectedCase {
        case_id: case_id.to_string(),
        reason,
        detail,
    }
}

fn parse_meta(text: &str) -> Vec<(String, String)> {
    text.lines()
        .take_while(|l| l.trim_start().starts_with('#'))
        .flat_map(|l| l.trim_start().trim_start_matches('#').split(','))
        .filter_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn parse_patient(meta: &[(String, String)]) -> std::result::Result<Patient, String> {
    let get = |key: &str| {
        meta.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| format!("missing {key}"))
    };
    let num = |key: &str| -> std::result::Result<f64, String> {
        let v = get(key)?;
        v.parse::<f64>().map_err(|_| format!("{key}={v} is not a number"))
    };
    let age = get("age")?;
    let age: u32 = age.parse().map_err(|_| format!("age={age} is not an integer"))?;
    let sex = match get("sex")? {
        "M" | "m" | "male" => Sex::Male,
        "F" | "f" | "female" => Sex::Female,
        other => return Err(format!("sex={other} is not M or F")),
    };
    Patient::new(age, sex, num("weight")?, num("height")?).map_err(|e| e.to_string())
}

fn parse_field(s: &str) -> std::result::Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("field {s:?} is not a finite number")),
    }
}

/// Linearly fills the invalid entries of `v` from the nearest valid
/// neighbours; edges copy the nearest valid value. Returns the longest run of
/// invalid entries.
fn fill_invalid(v: &mut [f64], valid: &[bool]) -> Option<usize> {
    let first = valid.iter().position(|&ok| ok)?;
    let last = valid.iter().rposition(|&ok| ok)?;
    let mut longest = first.max(v.len() - 1 - last);
    for i in 0..first {
        v[i] = v[first];
    }
    for i in last + 1..v.len() {
        v[i] = v[last];
    }
    let mut prev = first;
    for i in first + 1..=last {
        if !valid[i] {
            continue;
        }
        let gap = i - prev - 1;
        if gap > 0 {
            longest = longest.max(gap);
            let (a, b) = (v[prev], v[i]);
            for j in prev + 1..i {
                let w = (j - prev) as f64 / (i - prev) as f64;
                v[j] = a + w * (b - a);
            }
        }
        prev = i;
    }
    Some(longest)
}

/// Parses a case file and repairs missing values and outliers.
pub fn parse_and_clean(text: &str, source: &str) -> Result<RawCase> {
    let meta = parse_meta(text);
    let case_id = meta
        .iter()
        .find(|(k, _)| k == "case_id")
        .map(|(_, v)| v.clone())
        .unwrap_or_else(|| source.to_string());
    let malformed = |detail: String| reject(&case_id, RejectReason::Malformed, detail);
    let patient = parse_patient(&meta).map_err(|d| malformed(d))?;

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| malformed(e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["t", "ppf_dose", "rftn_dose", "bis"] {
        return Err(malformed(format!("unexpected header {header:?}")));
    }

    let mut start_s = None;
    let mut cols: [Vec<Option<f64>>; 3] = Default::default();
    let mut last_t = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        let at = |d: String| format!("row {}: {d}", line + 1);
        let t: i64 = rec[0]
            .parse()
            .map_err(|_| malformed(at(format!("timestamp {:?} is not an integer", &rec[0]))))?;
        if let Some(prev) = last_t {
            if t <= prev {
                return Err(malformed(at(format!("timestamp {t} does not increase"))));
            }
            // Skipped seconds become missing rows.
            for c in cols.iter_mut() {
                c.extend(std::iter::repeat_n(None, (t - prev - 1) as usize));
            }
        }
        start_s.get_or_insert(t);
        last_t = Some(t);
        for (k, c) in cols.iter_mut().enumerate() {
            c.push(parse_field(&rec[k + 1]).map_err(|d| malformed(at(d)))?);
        }
    }
    let Some(start_s) = start_s else {
        return Err(malformed("no data rows".into()));
    };

    let mut series = Vec::with_capacity(3);
    for (name, col) in ["ppf_dose", "rftn_dose", "bis"].iter().zip(&cols) {
        let is_bis = *name == "bis";
        let valid: Vec<bool> = col
            .iter()
            .map(|v| match v {
                Some(x) if is_bis => (0.0..=100.0).contains(x),
                Some(x) => *x >= 0.0,
                None => false,
            })
            .collect();
        let mut v: Vec<f64> = col.iter().map(|x| x.unwrap_or(0.0)).collect();
        match fill_invalid(&mut v, &valid) {
            None => {
                return Err(reject(
                    &case_id,
                    RejectReason::Gap,
                    format!("{name} has no valid value"),
                ))
            }
            Some(run) if run > MAX_GAP_S => {
                return Err(reject(
                    &case_id,
                    RejectReason::Gap,
                    format!("{name} is missing for {run} consecutive seconds"),
                ))
            }
            Some(_) => {}
        }
        series.push(v);
    }
    let bis = series.pop().expect("three columns");
    let rftn_dose = series.pop().expect("three columns");
    let ppf_dose = series.pop().expect("three columns");

    let n = ppf_dose.len();
    if ppf_dose[0] > 0.0 {
        return Err(reject(
            &case_id,
            RejectReason::Partial,
            "record starts during a propofol infusion".into(),
        ));
    }
    if ppf_dose[n - 1] > 0.0 {
        return Err(reject(
            &case_id,
            RejectReason::Partial,
            "record ends before propofol is stopped".into(),
        ));
    }
    Ok(RawCase {
        case_id,
        patient,
        start_s,
        ppf_dose,
        rftn_dose,
        bis,
    })
}

pub fn read_case_file(path: &Path) -> Result<RawCase> {
    let text = std::fs::read_to_string(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_and_clean(&text, &stem)
}

/// Writes a case in the file layout above.
pub fn write_case_csv<W: std::io::Write>(out: &mut W, case: &RawCase) -> Result<()> {
    let p = &case.patient;
    let sex = match p.sex {
        Sex::Male => "M",
        Sex::Female => "F",
    };
    writeln!(out, "# case_id={}", case.case_id)?;
    writeln!(
        out,
        "# age={},sex={sex},weight={},height={}",
        p.age, p.weight_kg, p.height_cm
    )?;
    writeln!(out, "t,ppf_dose,rftn_dose,bis")?;
    for i in 0..case.bis.len() {
        writeln!(
            out,
            "{},{},{},{}",
            case.start_s + i as i64,
            case.ppf_dose[i],
            case.rftn_dose[i],
            case.bis[i]
        )?;
    }
    Ok(())
}

pub fn bin_case(raw: &RawCase) -> Result<CaseSeries> {
    let first = raw.ppf_dose.iter().position(|&d| d > 0.0);
    let last = raw.ppf_dose.iter().rposition(|&d| d > 0.0);
    let (Some(t_induction_start), Some(t_propofol_stop)) = (first, last) else {
        return Err(Error::EmptyCase(raw.case_id.clone()));
    };
    let bins = raw
        .ppf_dose
        .chunks(BIN_S)
        .zip(raw.rftn_dose.chunks(BIN_S))
        .map(|(p, r)| {
            let ppf_dose: f64 = p.iter().sum();
            let rftn_dose: f64 = r.iter().sum();
            Bin {
                ppf_dose,
                rftn_dose,
                ppf_rate: ppf_dose / BIN_S as f64,
                rftn_rate: rftn_dose / BIN_S as f64,
            }
        })
        .collect();
    Ok(CaseSeries {
        case_id: raw.case_id.clone(),
        patient: raw.patient,
        start_s: raw.start_s,
        bins,
        bis: raw.bis.clone(),
        t_induction_start,
        t_propofol_stop,
        t_end: raw.bis.len() - 1,
    })
}

/// Single-pass LOWESS: a tricube-weighted local linear fit at every index
/// over its `ceil(frac * n)` nearest neighbours (at least 3).
pub fn lowess_smooth(y: &[f64], frac: f64) -> Result<Vec<f64>> {
    let n = y.len();
    if n < 3 {
        return Err(Error::SeriesTooShort { len: n, min: 3 });
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Config(format!("LOWESS fraction {frac} outside (0, 1]")));
    }
    let k = ((frac * n as f64).ceil() as usize).clamp(3, n);
    let mut out = Vec::with_capacity(n);
    let mut lo = 0usize;
    for i in 0..n {
        // Slide the k-point window while the point past its right edge is
        // closer to i than its left edge.
        while lo + k < n && (lo + k) - i < i - lo {
            lo += 1;
        }
        let hi = lo + k;
        let h = (i - lo).max(hi - 1 - i) as f64;
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        let mut wts = Vec::with_capacity(k);
        for j in lo..hi {
            let d = (j as f64 - i as f64).abs() / h;
            let w = if d < 1.0 { (1.0 - d * d * d).powi(3) } else { 0.0 };
            wts.push(w);
            sw += w;
            sx += w * j as f64;
            sy += w * y[j];
        }
        let (mx, my) = (sx / sw, sy / sw);
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for (w, j) in wts.iter().zip(lo..hi) {
            let dx = j as f64 - mx;
            sxx += w * dx * dx;
            sxy += w * dx * (y[j] - my);
        }
        let fit = if sxx > 1e-12 * sw {
            my + sxy / sxx * (i as f64 - mx)
        } else {
            my
        };
        out.push(fit);
    }
    Ok(out)
}

/// Affine standardization `(x - mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub scale: f64,
}

impl Standardizer {
    /// Population mean and standard deviation; a constant feature keeps scale 1.
    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut s, mut ss) = (0usize, 0.0, 0.0);
        for v in values {
            n += 1;
            s += v;
            ss += v * v;
        }
        if n == 0 {
            return Self { mean: 0.0, scale: 1.0 };
        }
        let mean = s / n as f64;
        let var = (ss / n as f64 - mean * mean).max(0.0);
        let sd = var.sqrt();
        Self {
            mean,
            scale: if sd > 1e-12 { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.scale
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.scale + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub ppf_rate: Standardizer,
    pub rftn_rate: Standardizer,
    /// Applied to both true and pseudo BIS.
    pub bis: Standardizer,
    pub age: Standardizer,
    pub sex: Standardizer,
    pub weight: Standardizer,
    pub height: Standardizer,
}

fn sex_code(s: Sex) -> f64 {
    match s {
        Sex::Male => 1.0,
        Sex::Female => 0.0,
    }
}

impl Norms {
    /// Statistics of the training split. `labels` are the per-second training
    /// labels of each case, after any smoothing.
    pub fn fit(cases: &[CaseSeries], labels: &[Vec<f64>]) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Config("no training cases to normalize on".into()));
        }
        let bins = || cases.iter().flat_map(|c| c.bins.iter());
        Ok(Self {
            ppf_rate: Standardizer::fit(bins().map(|b| b.ppf_rate)),
            rftn_rate: Standardizer::fit(bins().map(|b| b.rftn_rate)),
            bis: Standardizer::fit(labels.iter().flatten().copied()),
            age: Standardizer::fit(cases.iter().map(|c| c.patient.age as f64)),
            sex: Standardizer::fit(cases.iter().map(|c| sex_code(c.patient.sex))),
            weight: Standardizer::fit(cases.iter().map(|c| c.patient.weight_kg)),
            height: Standardizer::fit(cases.iter().map(|c| c.patient.height_cm)),
        })
    }

    pub fn statics(&self, p: &Patient) -> [f64; 4] {
        [
            self.age.apply(p.age as f64),
            self.sex.apply(sex_code(p.sex)),
            self.weight.apply(p.weight_kg),
            self.height.apply(p.height_cm),
        ]
    }
}

/// One prediction instance. Drug rates, pseudo-BIS and statics are
/// normalized; BIS history and target are in BIS units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub t: usize,
    /// `[WINDOW_BINS, 2]` row-major, propofol then remifentanil.
    pub x_drug: Vec<f64>,
    pub x_pseudo: Vec<f64>,
    pub statics: [f64; 4],
    pub y_history: Vec<f64>,
    pub y_target: f64,
    pub weight: f64,
}

/// Per-case series ready for windowing: normalized per-bin features and raw
/// labels. Samples are cut from it on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase {
    pub case_id: String,
    pub patient: Patient,
    pub start_s: i64,
    pub statics: [f64; 4],
    pub ppf_rate: Vec<f64>,
    pub rftn_rate: Vec<f64>,
    pub pseudo: Vec<f64>,
    /// Raw pseudo-BIS per bin, kept for the PK-PD baseline.
    pub pseudo_raw: Vec<f64>,
    /// Per-second labels, smoothed for training cases.
    pub bis: Vec<f64>,
    pub t_induction_start: usize,
    pub t_propofol_stop: usize,
    pub t_end: usize,
    /// Normalized values of the leading zero-infusion bins.
    pub pad_ppf: f64,
    pub pad_rftn: f64,
    pub pad_pseudo: f64,
}

/// Number of leading bins of the window at `t` that precede the record.
pub fn padded_bins(t: usize) -> usize {
    WINDOW_BINS.saturating_sub(t / BIN_S)
}

pub fn prepare_case(
    series: &CaseSeries,
    pseudo_bis: &[f64],
    norms: Option<&Norms>,
    smooth_frac: Option<f64>,
) -> Result<PreparedCase> {
    let norms = norms.ok_or(Error::MissingNorms)?;
    if pseudo_bis.len() != series.bins.len() {
        return Err(Error::MisalignedSeries(format!(
            "{} pseudo-BIS values for {} bins",
            pseudo_bis.len(),
            series.bins.len()
        )));
    }
    let bis = match smooth_frac {
        Some(f) => lowess_smooth(&series.bis, f)?
            .into_iter()
            .map(|v| v.clamp(0.0, 100.0))
            .collect(),
        None => series.bis.clone(),
    };
    Ok(PreparedCase {
        case_id: series.case_id.clone(),
        patient: series.patient,
        start_s: series.start_s,
        statics: norms.statics(&series.patient),
        ppf_rate: series.bins.iter().map(|b| norms.ppf_rate.apply(b.ppf_rate)).collect(),
        rftn_rate: series.bins.iter().map(|b| norms.rftn_rate.apply(b.rftn_rate)).collect(),
        pseudo: pseudo_bis.iter().map(|&v| norms.bis.apply(v)).collect(),
        pseudo_raw: pseudo_bis.to_vec(),
        bis,
        t_induction_start: series.t_induction_start,
        t_propofol_stop: series.t_propofol_stop,
        t_end: series.t_end,
        pad_ppf: norms.ppf_rate.apply(0.0),
        pad_rftn: norms.rftn_rate.apply(0.0),
        pad_pseudo: norms.bis.apply(PdParams::default().bis0),
    })
}

impl PreparedCase {
    /// Prediction times: every `stride` seconds from induction start, leaving
    /// room for the target one second later.
    pub fn sample_times(&self, stride: usize) -> impl Iterator<Item = usize> {
        (self.t_induction_start..self.t_end).step_by(stride.max(1))
    }

    /// Window ending at second `t`, covering the 180 bins before bin `t / 10`.
    pub fn sample(&self, t: usize, table: Option<&WeightTable>) -> Result<TrainingSample> {
        if t >= self.t_end {
            return Err(Error::ShapeMismatch(format!(
                "sample time {t} leaves no target before {}",
                self.t_end
            )));
        }
        let end = t / BIN_S;
        let pad = padded_bins(t);
        let mut x_drug = Vec::with_capacity(2 * WINDOW_BINS);
        let mut x_pseudo = Vec::with_capacity(WINDOW_BINS);
        let mut y_history = Vec::with_capacity(WINDOW_BINS);
        for k in 0..WINDOW_BINS {
            if k < pad {
                x_drug.extend([self.pad_ppf, self.pad_rftn]);
                x_pseudo.push(self.pad_pseudo);
                y_history.push(self.bis[0]);
            } else {
                let b = end + k - WINDOW_BINS;
                x_drug.extend([self.ppf_rate[b], self.rftn_rate[b]]);
                x_pseudo.push(self.pseudo[b]);
                y_history.push(self.bis[(b * BIN_S + BIN_S - 1).min(self.t_end)]);
            }
        }
        let y_target = self.bis[t + 1];
        let weight = match table {
            Some(tab) => tab.weight(y_target)?,
            None => 1.0,
        };
        Ok(TrainingSample {
            t,
            x_drug,
            x_pseudo,
            statics: self.statics,
            y_history,
            y_target,
            weight,
        })
    }
}

/// All windows of a case at the given stride.
pub fn build_windows(
    series: &CaseSeries,
    pseudo_bis: &[f64],
    norms: Option<&Norms>,
    table: Option<&WeightTable>,
    stride: usize,
) -> Result<Vec<TrainingSample>> {
    let case = prepare_case(series, pseudo_bis, norms, None)?;
    case.sample_times(stride)
        .map(|t| case.sample(t, table))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn is_disjoint(&self) -> bool {
        let a: BTreeSet<&String> = self.train.iter().collect();
        let b: BTreeSet<&String> = self.val.iter().collect();
        let c: BTreeSet<&String> = self.test.iter().collect();
        a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c)
    }
}

/// Seeded case-level split. Every split with a positive fraction receives at
/// least one case when there are enough cases to go around.
pub fn split_cases(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Config("duplicate case ids".into()));
    }
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let mut counts = fractions.map(|f| (f * n as f64).round() as usize);
    let wanted = fractions.iter().filter(|&&f| f > 0.0).count();
    if n >= wanted {
        for k in 0..3 {
            if fractions[k] > 0.0 && counts[k] == 0 {
                counts[k] = 1;
            }
        }
    }
    // Resolve rounding excess or shortfall on the training split.
    let others = counts[1] + counts[2];
    counts[0] = n.saturating_sub(others);
    if others > n {
        counts[2] = n - counts[1].min(n);
        counts[1] = counts[1].min(n);
    }
    let test = order.split_off(counts[0] + counts[1]);
    let val = order.split_off(counts[0]);
    Ok(SplitManifest {
        train: order,
        val,
        test,
    })
}

/// A set of prepared cases plus the stride of its sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cases: Vec<PreparedCase>,
    pub stride: usize,
}

const DATASET_MAGIC: &[u8; 8] = b"DOADATA\0";
const DATASET_VERSION: u8 = 1;

impl Dataset {
    /// `(case index, t)` for every sample.
    pub fn index(&self) -> Vec<(usize, usize)> {
        self.cases
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.sample_times(self.stride).map(move |t| (i, t)))
            .collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.index()
            .into_iter()
            .map(|(i, t)| self.cases[i].bis[t + 1])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.cases
            .iter()
            .map(|c| c.sample_times(self.stride).count())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::header(DATASET_MAGIC, DATASET_VERSION);
        e.usize(self.stride);
        e.usize(self.cases.len());
        for c in &self.cases {
            e.str(&c.case_id);
            e.usize(c.patient.age as usize);
            e.f64(sex_code(c.patient.sex));
            e.f64(c.patient.weight_kg);
            e.f64(c.patient.height_cm);
            e.u64(c.start_s as u64);
            e.f64s(&c.statics);
            e.f64s(&c.ppf_rate);
            e.f64s(&c.rftn_rate);
            e.f64s(&c.pseudo);
            e.f64s(&c.pseudo_raw);
            e.f64s(&c.bis);
            e.usizes(&[c.t_induction_start, c.t_propofol_stop, c.t_end]);
            e.f64s(&[c.pad_ppf, c.pad_rftn, c.pad_pseudo]);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut d, version) = Decoder::open(bytes, DATASET_MAGIC)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let stride = d.usize()?;
        let n = d.usize()?;
        let mut cases = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let case_id = d.str()?;
            let age = d.usize()? as u32;
            let sex = if d.f64()? == 1.0 { Sex::Male } else { Sex::Female };
            let patient = Patient::new(age, sex, d.f64()?, d.f64()?)?;
            let start_s = d.u64()? as i64;
            let statics: [f64; 4] = d
                .f64s()?
                .try_into()
                .map_err(|_| Error::Format("statics must have 4 entries".into()))?;
            let ppf_rate = d.f64s()?;
            let rftn_rate = d.f64s()?;
            let pseudo = d.f64s()?;
            let pseudo_raw = d.f64s()?;
            let bis = d.f64s()?;
            let anchors = d.usizes()?;
            let pads = d.f64s()?;
            if anchors.len() != 3 || pads.len() != 3 {
                return Err(Error::Format("bad anchor or padding block".into()));
            }
            let nb = ppf_rate.len();
            if rftn_rate.len() != nb
                || pseudo.len() != nb
                || pseudo_raw.len() != nb
                || bis.len() != anchors[2] + 1
                || nb != bis.len().div_ceil(BIN_S)
            {
                return Err(Error::Format(format!("inconsistent series in case {case_id}")));
            }
            cases.push(PreparedCase {
                case_id,
                patient,
                start_s,
                statics,
                ppf_rate,
                rftn_rate,
                pseudo,
                pseudo_raw,
                bis,
                t_induction_start: anchors[0],
                t_propofol_stop: anchors[1],
                t_end: anchors[2],
                pad_ppf: pads[0],
                pad_rftn: pads[1],
                pad_pseudo: pads[2],
            });
        }
        d.finish()?;
        Ok(Self { cases, stride })
    }
}

/// Normalization constants and the three split datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub norms: Norms,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Fits normalization on the training split (smoothed labels), unless
/// `fixed` supplies it, and prepares every case. `cases` pairs each binned
/// series with its per-bin pseudo-BIS.
pub fn assemble_datasets(
    cases: &[(CaseSeries, Vec<f64>)],
    manifest: &SplitManifest,
    smooth_frac: f64,
    stride: usize,
    fixed: Option<&Norms>,
) -> Result<Assembled> {
    let find = |id: &String| {
        cases
            .iter()
            .find(|(s, _)| &s.case_id == id)
            .ok_or_else(|| Error::Config(format!("split names unknown case {id}")))
    };
    let pick = |ids: &[String]| ids.iter().map(find).collect::<Result<Vec<_>>>();
    let train = pick(&manifest.train)?;
    let val = pick(&manifest.val)?;
    let test = pick(&manifest.test)?;
    let norms = match fixed {
        Some(n) => *n,
        None => {
            let mut labels = Vec::with_capacity(train.len());
            for (s, _) in &train {
                labels.push(
                    lowess_smooth(&s.bis, smooth_frac)?
                        .into_iter()
                        .map(|v| v.clamp(0.0, 100.0))
                        .collect(),
                );
            }
            let series: Vec<CaseSeries> = train.iter().map(|(s, _)| s.clone()).collect();
            Norms::fit(&series, &labels)?
        }
    };
    let prep = |set: &[&(CaseSeries, Vec<f64>)], frac: Option<f64>| -> Result<Dataset> {
        let cases = set
            .iter()
            .map(|(s, p)| prepare_case(s, p, Some(&norms), frac))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { cases, stride })
    };
    Ok(Assembled {
        train: prep(&train, Some(smooth_frac))?,
        val: prep(&val, None)?,
        test: prep(&test, None)?,
        norms,
    })
}
