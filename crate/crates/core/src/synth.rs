//! Synthetic surgical cases: sampled patients, a plasma-targeting infusion
//! schedule for both drugs, and a BIS trace from PK-PD parameters that differ
//! from the covariate model, plus measurement noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datapipe::RawCase;
use crate::error::{Error, Result};
use crate::pkpd::{
    derive_pk_params, CompartmentModel, CompartmentState, Drug, Patient, PdParams, PkParams,
    PkPdModel, Sex,
};

/// Mean, standard deviation and range of one covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateDist {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl CovariateDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let n = Normal::new(self.mean, self.sd).expect("positive sd");
        n.sample(rng).clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cases: usize,
    /// Inclusive range of record lengths in seconds.
    pub duration_s: (usize, usize),
    pub seed: u64,
    pub noise_sd: f64,
    /// When false the ground truth uses the covariate-derived parameters.
    pub perturb: bool,
    pub age: CovariateDist,
    pub weight: CovariateDist,
    pub height: CovariateDist,
    pub male_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 32,
            duration_s: (3000, 5400),
            seed: 42,
            noise_sd: 2.5,
            perturb: true,
            age: CovariateDist { mean: 56.1, sd: 14.0, min: 17.0, max: 82.0 },
            weight: CovariateDist { mean: 61.5, sd: 10.2, min: 37.9, max: 98.1 },
            height: CovariateDist { mean: 163.2, sd: 8.2, min: 138.8, max: 186.6 },
            male_fraction: 113.0 / 180.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases < 1 {
            return Err(Error::Config("at least one case is required".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config(format!("noise sd {} is negative", self.noise_sd)));
        }
        let (lo, hi) = self.duration_s;
        if lo > hi || lo < MIN_DURATION_S {
            return Err(Error::Config(format!(
                "duration range {lo}..={hi} s must be ordered and start at {MIN_DURATION_S} s or more"
            )));
        }
        for (name, d) in [("age", self.age), ("weight", self.weight), ("height", self.height)] {
            if !(d.sd > 0.0 && d.min <= d.max) {
                return Err(Error::Config(format!("bad {name} distribution {d:?}")));
            }
        }
        if !(0.0..=1.0).contains(&self.male_fraction) {
            return Err(Error::Config("male fraction outside [0, 1]".into()));
        }
        Ok(())
    }
}

const MIN_DURATION_S: usize = 2400;
const PERTURB_MIN: f64 = 0.8;
const PERTURB_MAX: f64 = 1.25;
/// Pump ceilings: 1200 mL/h of 10 mg/mL propofol and of 50 µg/mL remifentanil.
const PPF_MAX_RATE: f64 = 3333.0;
const RFTN_MAX_RATE: f64 = 16.7;

/// Multipliers applied to the covariate-model parameters of one synthetic patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub ppf_cl1: f64,
    pub ppf_v2: f64,
    pub ppf_ke0: f64,
    pub rftn_cl1: f64,
    pub ec50p: f64,
    pub ec50r: f64,
    pub bis0: f64,
}

impl Perturbation {
    pub fn identity() -> Self {
        Self {
            ppf_cl1: 1.0,
            ppf_v2: 1.0,
            ppf_ke0: 1.0,
            rftn_cl1: 1.0,
            ec50p: 1.0,
            ec50r: 1.0,
            bis0: 1.0,
        }
    }

    /// Part of each factor follows the covariates so that it is learnable
    /// from them; the rest is patient-specific.
    fn sample(p: &Patient, rng: &mut ChaCha8Rng) -> Self {
        let age = (p.age as f64 - 56.0) / 14.0;
        let weight = (p.weight_kg - 61.5) / 10.2;
        let male = if p.sex == Sex::Male { 1.0 } else { -1.0 };
        let noise = Normal::new(0.0, 0.06).expect("positive sd");
        let mut factor = |shift: f64| (shift + noise.sample(rng)).exp().clamp(PERTURB_MIN, PERTURB_MAX);
        Self {
            ppf_cl1: factor(-0.06 * age + 0.04 * weight),
            ppf_v2: factor(0.05 * weight),
            ppf_ke0: factor(-0.04 * age),
            rftn_cl1: factor(-0.05 * age),
            ec50p: factor(-0.07 - 0.08 * age + 0.03 * male),
            ec50r: factor(-0.05 * age),
            bis0: factor(-0.02).min(1.0),
        }
    }

    fn apply(&self, ppf: &PkParams, rftn: &PkParams) -> (PkParams, PkParams, PdParams) {
        let pd = PdParams::default();
        (
            PkParams {
                cl1: ppf.cl1 * self.ppf_cl1,
                v2: ppf.v2 * self.ppf_v2,
                ke0: ppf.ke0 * self.ppf_ke0,
                ..*ppf
            },
            PkParams {
                cl1: rftn.cl1 * self.rftn_cl1,
                ..*rftn
            },
            PdParams {
                ec50p: pd.ec50p * self.ec50p,
                ec50r: pd.ec50r * self.ec50r,
                bis0: pd.bis0 * self.bis0,
                ..pd
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub raw: RawCase,
    pub perturbation: Perturbation,
}

/// Infusion rate (µg/s) that brings the central concentration to `target`
/// after one step, within pump limits. Exact for the linear RK4 update.
fn plasma_tci_rate(model: &CompartmentModel, s: &CompartmentState, target: f64, max_rate: f64) -> f64 {
    let free = model.rk4_step(s, 0.0, 1.0).c1;
    let unit = model.rk4_step(&CompartmentState::default(), 1.0, 1.0).c1;
    ((target - free) / unit).clamp(0.0, max_rate)
}

/// Plasma targets over time, one entry per second.
struct Schedule {
    ppf_target: Vec<f64>,
    rftn_target: Vec<f64>,
}

fn schedule(total: usize, rng: &mut ChaCha8Rng) -> Schedule {
    let lead = rng.random_range(60..=300);
    let tail = rng.random_range(600..=1200);
    let stop = total - tail;
    let rftn_stop = stop - rng.random_range(0..=120);
    let induction_end = lead + rng.random_range(180..=420);
    let taper_start = stop - rng.random_range(300..=600);
    let induction_target = rng.random_range(5.5..7.0);
    let mut ppf = rng.random_range(4.2..5.4);
    let mut rftn = rng.random_range(2.5..6.0);
    let mut next_change = induction_end + rng.random_range(480..=1200);

    let mut out = Schedule {
        ppf_target: vec![0.0; total],
        rftn_target: vec![0.0; total],
    };
    for t in lead..stop {
        if t >= next_change && t < taper_start {
            let step = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.1f64 } else { 0.9 };
            ppf = (ppf * step(rng)).clamp(3.5, 6.5);
            rftn = (rftn * step(rng)).clamp(1.5, 8.0);
            next_change = t + rng.random_range(480..=1200);
        }
        let taper = if t >= taper_start { 0.75 } else { 1.0 };
        out.ppf_target[t] = if t < induction_end { induction_target } else { ppf * taper };
        if t < rftn_stop {
            out.rftn_target[t] = rftn * taper;
        }
    }
    out
}

fn sample_patient(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Patient> {
    let sex = if rng.random_bool(cfg.male_fraction) { Sex::Male } else { Sex::Female };
    let age = cfg.age.sample(rng).round() as u32;
    let weight = cfg.weight.sample(rng);
    let height = cfg.height.sample(rng);
    Patient::new(age, sex, weight, height)
}

fn round_dose(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

pub fn generate_case(cfg: &SynthConfig, index: usize) -> Result<SynthCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let patient = sample_patient(cfg, &mut rng)?;
    let total = rng.random_range(cfg.duration_s.0..=cfg.duration_s.1);
    let plan = schedule(total, &mut rng);
    let perturbation = if cfg.perturb {
        Perturbation::sample(&patient, &mut rng)
    } else {
        Perturbation::identity()
    };

    // The pumps follow the covariate model.
    let nominal = PkPdModel::for_patient(&patient)?;
    let (mut sp, mut sr) = (CompartmentState::default(), CompartmentState::default());
    let mut ppf_dose = Vec::with_capacity(total);
    let mut rftn_dose = Vec::with_capacity(total);
    for t in 0..total {
        let up = round_dose(plasma_tci_rate(&nominal.propofol, &sp, plan.ppf_target[t], PPF_MAX_RATE));
        let ur = round_dose(plasma_tci_rate(&nominal.remifentanil, &sr, plan.rftn_target[t], RFTN_MAX_RATE));
        sp = nominal.propofol.rk4_step(&sp, up, 1.0);
        sr = nominal.remifentanil.rk4_step(&sr, ur, 1.0);
        ppf_dose.push(up);
        rftn_dose.push(ur);
    }

    let (ppf_pk, rftn_pk, pd) = perturbation.apply(
        &derive_pk_params(&patient, Drug::Propofol)?,
        &derive_pk_params(&patient, Drug::Remifentanil)?,
    );
    let truth = PkPdModel::from_params(&ppf_pk, &rftn_pk, pd)?;
    let clean = truth.bis_series(&ppf_dose, &rftn_dose, 1.0, 1.0)?;
    let bis = if cfg.noise_sd > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sd).expect("positive sd");
        clean
            .iter()
            .map(|b| (b + noise.sample(&mut rng)).clamp(0.0, 100.0))
            .collect()
    } else {
        clean
    };
    Ok(SynthCase {
        raw: RawCase {
            case_id: format!("case-{index:04}"),
            patient,
            start_s: 0,
            ppf_dose,
            rftn_dose,
            bis,
        },
        perturbation,
    })
}

/// Every case of the configuration, in index order.
pub fn generate_case_set(cfg: &SynthConfig) -> Result<Vec<SynthCase>> {
    cfg.validate()?;
    (0..cfg.n_cases).map(|i| generate_case(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{parse_and_clean, write_case_csv};

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n_cases: n,
            ..Default::default()
        }
    }

    fn csv_bytes(c: &SynthCase) -> Vec<u8> {
        let mut buf = Vec::new();
        write_case_csv(&mut buf, &c.raw).unwrap();
        buf
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_case_set(&small(3)).unwrap();
        let b = generate_case_set(&small(3)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(csv_bytes(x), csv_bytes(y));
        }
        let other = generate_case_set(&SynthConfig { seed: 7, ..small(3) }).unwrap();
        assert_ne!(csv_bytes(&a[0]), csv_bytes(&other[0]));
        // Case streams do not depend on how many cases are requested.
        assert_eq!(csv_bytes(&generate_case(&small(1), 2).unwrap()), csv_bytes(&a[2]));
    }

    #[test]
    fn identity_configuration_reproduces_pkpd() {
        let cfg = SynthConfig {
            noise_sd: 0.0,
            perturb: false,
            ..small(1)
        };
        let c = generate_case(&cfg, 0).unwrap();
        let model = PkPdModel::for_patient(&c.raw.patient).unwrap();
        let bis = model.bis_series(&c.raw.ppf_dose, &c.raw.rftn_dose, 1.0, 1.0).unwrap();
        assert_eq!(bis, c.raw.bis);
    }

    #[test]
    fn covariates_stay_in_range() {
        let cfg = SynthConfig::default();
        for i in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i);
            let p = sample_patient(&cfg, &mut rng).unwrap();
            assert!((17..=82).contains(&p.age));
            assert!((37.9..=98.1).contains(&p.weight_kg));
            assert!((138.8..=186.6).contains(&p.height_cm));
        }
    }

    #[test]
    fn perturbations_within_bounds() {
        for c in generate_case_set(&small(8)).unwrap() {
            let p = c.perturbation;
            for f in [p.ppf_cl1, p.ppf_v2, p.ppf_ke0, p.rftn_cl1, p.ec50p, p.ec50r, p.bis0] {
                assert!((PERTURB_MIN..=PERTURB_MAX).contains(&f));
            }
        }
    }

    #[test]
    fn generated_cases_parse_cleanly() {
        for c in generate_case_set(&small(4)).unwrap() {
            let text = String::from_utf8(csv_bytes(&c)).unwrap();
            let back = parse_and_clean(&text, "x").unwrap();
            assert_eq!(back, c.raw);
        }
    }

    #[test]
    fn bad_config_rejected() {
        assert!(generate_case_set(&small(0)).is_err());
        assert!(generate_case_set(&SynthConfig { noise_sd: -1.0, ..small(1) }).is_err());
    }
}
