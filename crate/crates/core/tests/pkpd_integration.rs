use doa_core::pkpd::{
    derive_pk_params, derive_rate_constants, CompartmentModel, CompartmentState, Drug, Patient,
    PkPdModel, RateConstants, Sex,
};

fn adult() -> Patient {
    Patient::new(45, Sex::Female, 68.0, 165.0).unwrap()
}

#[test]
fn amount_is_conserved_without_elimination() {
    let pk = derive_pk_params(&adult(), Drug::Propofol).unwrap();
    let k = derive_rate_constants(&pk);
    let rates = RateConstants { k10: 0.0, ..k };
    let model = CompartmentModel::new([pk.v1, pk.v2, pk.v3], rates, pk.ke0, 1.0).unwrap();
    let mut s = CompartmentState {
        c1: 10.0,
        ..Default::default()
    };
    let start = model.amount(&s);
    for _ in 0..10_000 {
        s = model.rk4_step(&s, 0.0, 1.0);
    }
    let drift = (model.amount(&s) - start).abs() / start;
    assert!(drift < 1e-6, "relative drift {drift:e}");
    // Mass did move into the peripheral compartments.
    assert!(s.c3 > 0.1);
}

fn bolus_trajectory(model: &CompartmentModel, dt_s: f64, horizon_s: f64, sample_s: f64) -> Vec<CompartmentState> {
    let per_sample = (sample_s / dt_s).round() as usize;
    let samples = (horizon_s / sample_s).round() as usize;
    let mut s = CompartmentState {
        c1: 8.0,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        for _ in 0..per_sample {
            s = model.rk4_step(&s, 0.0, dt_s);
        }
        out.push(s);
    }
    out
}

fn max_error(a: &[CompartmentState], b: &[CompartmentState]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            [
                (x.c1 - y.c1).abs(),
                (x.c2 - y.c2).abs(),
                (x.c3 - y.c3).abs(),
                (x.ce - y.ce).abs(),
            ]
        })
        .fold(0.0, f64::max)
}

#[test]
fn halving_the_step_shrinks_error_by_fourth_order() {
    // Remifentanil has the fastest kinetics of the two drugs.
    let pk = derive_pk_params(&adult(), Drug::Remifentanil).unwrap();
    let model = CompartmentModel::from_pk(&pk, Drug::Remifentanil).unwrap();
    let dt = 20.0;
    let reference = bolus_trajectory(&model, dt / 100.0, 1200.0, 20.0);
    let coarse = max_error(&bolus_trajectory(&model, dt, 1200.0, 20.0), &reference);
    let fine = max_error(&bolus_trajectory(&model, dt / 2.0, 1200.0, 20.0), &reference);
    let ratio = coarse / fine;
    assert!(ratio >= 8.0, "error ratio {ratio} ({coarse:e} -> {fine:e})");
}

#[test]
fn one_second_steps_track_a_fine_reference() {
    let model = PkPdModel::for_patient(&adult()).unwrap();
    // Ten minutes of a 150 µg/s propofol infusion, then ten minutes off.
    let ppf: Vec<f64> = (0..120).map(|b| if b < 60 { 150.0 } else { 0.0 }).collect();
    let rftn = vec![0.0; ppf.len()];
    let coarse = model.bis_series(&ppf, &rftn, 10.0, 1.0).unwrap();
    let fine = model.bis_series(&ppf, &rftn, 10.0, 0.01).unwrap();
    let dev = coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(dev < 0.05, "max deviation {dev}");
    for w in coarse[..60].windows(2) {
        assert!(w[1] < w[0], "pseudo-BIS must fall during the infusion");
    }
    assert!(coarse.iter().all(|&b| (0.0..=98.0).contains(&b)));
}
