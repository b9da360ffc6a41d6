//! Three-compartment pharmacokinetics with an effect site, and the two-drug
//! response surface that maps effect-site concentrations to BIS.
//!
//! Propofol uses the Schnider covariate model and remifentanil the Minto
//! model. Concentrations are reported in µg/mL for propofol and ng/mL for
//! remifentanil, the units the EC50 values are quoted in. Infusion rates are
//! always µg/s; rate constants are per minute.

use serde::{Deserialize, Serialize};

use crate::datapipe::{CaseSeries, BIN_S};
use crate::error::{Error, Result};

/// Internal integration step used for case simulation, in seconds.
pub const DEFAULT_DT_S: f64 = 1.0;

/// Tolerance below zero tolerated (and clamped) after an integration step.
const CLAMP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub age: u32,
    pub sex: Sex,
    pub weight_kg: f64,
    pub height_cm: f64,
}

impl Patient {
    pub fn new(age: u32, sex: Sex, weight_kg: f64, height_cm: f64) -> Result<Self> {
        let p = Self {
            age,
            sex,
            weight_kg,
            height_cm,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.age > 130 {
            return Err(Error::InvalidPatient(format!("age {} outside [0, 130]", self.age)));
        }
        if !(self.weight_kg > 0.0 && self.weight_kg <= 400.0) {
            return Err(Error::InvalidPatient(format!(
                "weight {} kg outside (0, 400]",
                self.weight_kg
            )));
        }
        if !(self.height_cm > 50.0 && self.height_cm <= 260.0) {
            return Err(Error::InvalidPatient(format!(
                "height {} cm outside (50, 260]",
                self.height_cm
            )));
        }
        Ok(())
    }
}

/// Lean body mass in kg (James formula).
pub fn compute_lbm(p: &Patient) -> Result<f64> {
    let ratio = p.weight_kg / p.height_cm;
    let lbm = match p.sex {
        Sex::Male => 1.1 * p.weight_kg - 128.0 * ratio * ratio,
        Sex::Female => 1.07 * p.weight_kg - 140.0 * ratio * ratio,
    };
    if !(lbm > 0.0) {
        return Err(Error::NonPositiveLbm(lbm));
    }
    Ok(lbm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Drug {
    Propofol,
    Remifentanil,
}

impl Drug {
    /// Factor converting µg/L (amount in µg over volume in L) into the
    /// reporting unit: µg/mL for propofol, ng/mL for remifentanil.
    pub fn concentration_scale(self) -> f64 {
        match self {
            Drug::Propofol => 1e-3,
            Drug::Remifentanil => 1.0,
        }
    }
}

/// Volumes in L, clearances in L/min, `ke0` in 1/min.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkParams {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub cl1: f64,
    pub cl2: f64,
    pub cl3: f64,
    pub ke0: f64,
}

impl PkParams {
    fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("v1", self.v1),
            ("v2", self.v2),
            ("v3", self.v3),
            ("cl1", self.cl1),
            ("cl2", self.cl2),
            ("cl3", self.cl3),
            ("ke0", self.ke0),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in self.fields() {
            if !(value > 0.0) {
                return Err(Error::NonPositiveParameter { name, value });
            }
        }
        Ok(())
    }
}

/// Schnider (propofol) or Minto (remifentanil) parameters for a patient.
pub fn derive_pk_params(p: &Patient, drug: Drug) -> Result<PkParams> {
    let lbm = compute_lbm(p)?;
    let age = f64::from(p.age);
    let (wgt, hgt) = (p.weight_kg, p.height_cm);
    let params = match drug {
        Drug::Propofol => PkParams {
            v1: 4.27,
            v2: 18.9 - 0.391 * (age - 53.0),
            v3: 238.0,
            cl1: 1.89 + 0.0456 * (wgt - 77.0) - 0.0681 * (lbm - 59.0) + 0.0264 * (hgt - 177.0),
            cl2: 1.29 - 0.024 * (age - 53.0),
            cl3: 0.836,
            ke0: 0.46,
        },
        Drug::Remifentanil => PkParams {
            v1: 5.1 - 0.0201 * (age - 40.0) + 0.072 * (lbm - 55.0),
            v2: 9.82 - 0.0811 * (age - 40.0),
            v3: 5.42,
            cl1: 2.6 - 0.0162 * (age - 40.0) + 0.0191 * (lbm - 55.0),
            cl2: 2.05 - 0.0301 * (age - 40.0),
            cl3: 0.076 - 0.00113 * (age - 40.0),
            ke0: 0.595 - 0.007 * (age - 40.0),
        },
    };
    params.validate()?;
    Ok(params)
}

/// First-order transfer rate constants, 1/min.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    pub k10: f64,
    pub k12: f64,
    pub k21: f64,
    pub k13: f64,
    pub k31: f64,
}

pub fn derive_rate_constants(pk: &PkParams) -> RateConstants {
    RateConstants {
        k10: pk.cl1 / pk.v1,
        k12: pk.cl2 / pk.v1,
        k21: pk.cl2 / pk.v2,
        k13: pk.cl3 / pk.v1,
        k31: pk.cl3 / pk.v3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CompartmentState {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub ce: f64,
}

impl CompartmentState {
    fn axpy(self, a: f64, d: CompartmentState) -> Self {
        Self {
            c1: self.c1 + a * d.c1,
            c2: self.c2 + a * d.c2,
            c3: self.c3 + a * d.c3,
            ce: self.ce + a * d.ce,
        }
    }

    fn min_component(&self) -> f64 {
        self.c1.min(self.c2).min(self.c3).min(self.ce)
    }

    fn clamped(self) -> Self {
        Self {
            c1: self.c1.max(0.0),
            c2: self.c2.max(0.0),
            c3: self.c3.max(0.0),
            ce: self.ce.max(0.0),
        }
    }
}

/// Mammillary three-compartment model with an effect site of negligible volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompartmentModel {
    pub volumes: [f64; 3],
    pub rates: RateConstants,
    pub ke0: f64,
    /// Converts µg/L into this model's concentration unit.
    pub scale: f64,
}

impl CompartmentModel {
    pub fn new(volumes: [f64; 3], rates: RateConstants, ke0: f64, scale: f64) -> Result<Self> {
        for (name, v) in ["v1", "v2", "v3"].into_iter().zip(volumes) {
            if !(v > 0.0) {
                return Err(Error::NonPositiveParameter { name, value: v });
            }
        }
        let ks = [
            ("k10", rates.k10),
            ("k12", rates.k12),
            ("k21", rates.k21),
            ("k13", rates.k13),
            ("k31", rates.k31),
        ];
        for (name, k) in ks {
            if !(k >= 0.0) {
                return Err(Error::NonPositiveParameter { name, value: k });
            }
        }
        if !(ke0 > 0.0) {
            return Err(Error::NonPositiveParameter { name: "ke0", value: ke0 });
        }
        Ok(Self {
            volumes,
            rates,
            ke0,
            scale,
        })
    }

    pub fn from_pk(pk: &PkParams, drug: Drug) -> Result<Self> {
        pk.validate()?;
        Self::new(
            [pk.v1, pk.v2, pk.v3],
            derive_rate_constants(pk),
            pk.ke0,
            drug.concentration_scale(),
        )
    }

    /// Time derivative per minute; `input` is the central-compartment inflow
    /// in concentration-unit·L per minute.
    fn derivative(&self, s: &CompartmentState, input: f64) -> CompartmentState {
        let [v1, v2, v3] = self.volumes;
        let k = &self.rates;
        CompartmentState {
            c1: (v2 * s.c2 * k.k21 + v3 * s.c3 * k.k31 - v1 * s.c1 * (k.k10 + k.k12 + k.k13)
                + input)
                / v1,
            c2: (v1 * s.c1 * k.k12 - v2 * s.c2 * k.k21) / v2,
            c3: (v1 * s.c1 * k.k13 - v3 * s.c3 * k.k31) / v3,
            ce: self.ke0 * (s.c1 - s.ce),
        }
    }

    /// One classical fourth-order Runge-Kutta step with the infusion rate held
    /// constant over the step.
    pub fn rk4_step(&self, s: &CompartmentState, rate_ug_per_s: f64, dt_s: f64) -> CompartmentState {
        let input = rate_ug_per_s * 60.0 * self.scale;
        let h = dt_s / 60.0;
        let k1 = self.derivative(s, input);
        let k2 = self.derivative(&s.axpy(h / 2.0, k1), input);
        let k3 = self.derivative(&s.axpy(h / 2.0, k2), input);
        let k4 = self.derivative(&s.axpy(h, k3), input);
        CompartmentState {
            c1: s.c1 + h / 6.0 * (k1.c1 + 2.0 * k2.c1 + 2.0 * k3.c1 + k4.c1),
            c2: s.c2 + h / 6.0 * (k1.c2 + 2.0 * k2.c2 + 2.0 * k3.c2 + k4.c2),
            c3: s.c3 + h / 6.0 * (k1.c3 + 2.0 * k2.c3 + 2.0 * k3.c3 + k4.c3),
            ce: s.ce + h / 6.0 * (k1.ce + 2.0 * k2.ce + 2.0 * k3.ce + k4.ce),
        }
    }

    /// Integrates a piecewise-constant infusion. Each entry of `rates` (µg/s)
    /// is held for `hold_s` seconds; the state at the end of every hold
    /// interval is returned.
    pub fn integrate(
        &self,
        init: CompartmentState,
        rates: &[f64],
        hold_s: f64,
        dt_s: f64,
    ) -> Result<Vec<CompartmentState>> {
        let steps = steps_per_hold(hold_s, dt_s)?;
        let mut state = init;
        let mut out = Vec::with_capacity(rates.len());
        let mut step = 0;
        for &rate in rates {
            if !(rate >= 0.0) || !rate.is_finite() {
                return Err(Error::DomainError(format!("infusion rate {rate} is negative")));
            }
            for _ in 0..steps {
                state = self.rk4_step(&state, rate, dt_s);
                step += 1;
                let low = state.min_component();
                if !low.is_finite() || low < -CLAMP_TOLERANCE {
                    return Err(Error::NegativeConcentration { step, value: low });
                }
                state = state.clamped();
            }
            out.push(state);
        }
        Ok(out)
    }

    /// Total drug amount in the three compartments (concentration-unit·L).
    pub fn amount(&self, s: &CompartmentState) -> f64 {
        self.volumes[0] * s.c1 + self.volumes[1] * s.c2 + self.volumes[2] * s.c3
    }
}

fn steps_per_hold(hold_s: f64, dt_s: f64) -> Result<usize> {
    if !(dt_s > 0.0) || !(hold_s > 0.0) {
        return Err(Error::MisalignedSeries(format!(
            "step {dt_s} s and hold {hold_s} s must be positive"
        )));
    }
    let n = (hold_s / dt_s).round();
    if n < 1.0 || (n * dt_s - hold_s).abs() > 1e-9 * hold_s.max(1.0) {
        return Err(Error::MisalignedSeries(format!(
            "hold interval {hold_s} s is not a multiple of step {dt_s} s"
        )));
    }
    Ok(n as usize)
}

/// Response-surface pharmacodynamic parameters. EC50 values are in the
/// per-drug reporting units (µg/mL propofol, ng/mL remifentanil).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdParams {
    pub bis0: f64,
    pub bis_min: f64,
    pub ec50p: f64,
    pub ec50r: f64,
    pub gamma: f64,
}

impl Default for PdParams {
    fn default() -> Self {
        Self {
            bis0: 98.0,
            bis_min: 0.0,
            ec50p: 4.47,
            ec50r: 19.3,
            gamma: 1.43,
        }
    }
}

impl PdParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.bis0 > self.bis_min
            && self.bis_min >= 0.0
            && self.ec50p > 0.0
            && self.ec50r > 0.0
            && self.gamma > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid PD parameters {self:?}")));
        }
        Ok(())
    }
}

/// BIS from the effect-site concentrations of propofol and remifentanil.
pub fn response_surface_bis(ec_p: f64, ec_r: f64, pd: &PdParams) -> f64 {
    let s = ec_r / pd.ec50r + ec_p / pd.ec50p;
    let sg = s.powf(pd.gamma);
    pd.bis0 + (pd.bis_min - pd.bis0) * sg / (1.0 + sg)
}

/// Both drug models plus the response surface for one patient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PkPdModel {
    pub propofol: CompartmentModel,
    pub remifentanil: CompartmentModel,
    pub pd: PdParams,
}

impl PkPdModel {
    pub fn for_patient(p: &Patient) -> Result<Self> {
        p.validate()?;
        Self::from_params(
            &derive_pk_params(p, Drug::Propofol)?,
            &derive_pk_params(p, Drug::Remifentanil)?,
            PdParams::default(),
        )
    }

    pub fn from_params(propofol: &PkParams, remifentanil: &PkParams, pd: PdParams) -> Result<Self> {
        pd.validate()?;
        Ok(Self {
            propofol: CompartmentModel::from_pk(propofol, Drug::Propofol)?,
            remifentanil: CompartmentModel::from_pk(remifentanil, Drug::Remifentanil)?,
            pd,
        })
    }

    /// Effect-site trajectories of both drugs, one state per hold interval.
    pub fn integrate_case(
        &self,
        propofol_rates: &[f64],
        remifentanil_rates: &[f64],
        hold_s: f64,
        dt_s: f64,
    ) -> Result<(Vec<CompartmentState>, Vec<CompartmentState>)> {
        if propofol_rates.len() != remifentanil_rates.len() {
            return Err(Error::MisalignedSeries(format!(
                "{} propofol rates vs {} remifentanil rates",
                propofol_rates.len(),
                remifentanil_rates.len()
            )));
        }
        let zero = CompartmentState::default();
        let p = self.propofol.integrate(zero, propofol_rates, hold_s, dt_s)?;
        let r = self.remifentanil.integrate(zero, remifentanil_rates, hold_s, dt_s)?;
        Ok((p, r))
    }

    /// BIS at the end of every hold interval.
    pub fn bis_series(
        &self,
        propofol_rates: &[f64],
        remifentanil_rates: &[f64],
        hold_s: f64,
        dt_s: f64,
    ) -> Result<Vec<f64>> {
        let (p, r) = self.integrate_case(propofol_rates, remifentanil_rates, hold_s, dt_s)?;
        Ok(p
            .iter()
            .zip(&r)
            .map(|(sp, sr)| response_surface_bis(sp.ce, sr.ce, &self.pd))
            .collect())
    }
}

/// Integrates both drugs for a patient with the covariate-derived parameters.
pub fn integrate_case(
    p: &Patient,
    propofol_rates: &[f64],
    remifentanil_rates: &[f64],
    hold_s: f64,
    dt_s: f64,
) -> Result<(Vec<CompartmentState>, Vec<CompartmentState>)> {
    PkPdModel::for_patient(p)?.integrate_case(propofol_rates, remifentanil_rates, hold_s, dt_s)
}

/// Pseudo-BIS at the end of every 10 s bin of a case, from the
/// covariate-derived parameters.
pub fn pkpd_pseudo_bis(p: &Patient, case: &CaseSeries) -> Result<Vec<f64>> {
    PkPdModel::for_patient(p)?.bis_series(
        &case.ppf_rates(),
        &case.rftn_rates(),
        BIN_S as f64,
        DEFAULT_DT_S,
    )
}

/// BIS at the end of every second, holding each bin's rates for its ten
/// seconds. Entry `k` is the prediction for second `k + 1`.
pub fn pkpd_bis_per_second(p: &Patient, ppf_rates: &[f64], rftn_rates: &[f64]) -> Result<Vec<f64>> {
    let expand = |r: &[f64]| -> Vec<f64> { r.iter().flat_map(|&v| std::iter::repeat_n(v, BIN_S)).collect() };
    PkPdModel::for_patient(p)?.bis_series(&expand(ppf_rates), &expand(rftn_rates), 1.0, DEFAULT_DT_S)
}
