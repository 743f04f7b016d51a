use choicemiss::sensitivity::{dr_sens, ipw_sens, pm_sens, tilted_probabilities};
use choicemiss::sim::{simulate_dataset, Scenario};
use choicemiss::{
    fit_alpha_theta, fit_complete_case_mle, fit_pairwise_logistic, parse_grid, parse_tilt, solve_dr, solve_ipw,
    solve_pm, sweep, DefaultDesign, EstimandSpec, ExpTilt, LawSpec, Method, PatternDesigns, PatternMask,
    PatternedDataset, SelectionBiasSpec, VariableSchema,
};
use proptest::prelude::*;

/// Binary `(A, Y)` with `Y` balanced within each level of `A` among complete
/// cases and `Y` missing for a third of the rows. Under the tilt
/// `exp(φ Y)` on the missing `Y`, every estimator of `E(Y)` equals
/// `(1 + expit(φ)) / 3`.
fn symmetric_toy() -> PatternedDataset {
    let s = VariableSchema::binary(&["A", "Y"]).unwrap();
    let mut rows = Vec::new();
    for a in [0.0, 1.0] {
        for y in [0.0, 1.0] {
            rows.extend(std::iter::repeat_n(vec![Some(a), Some(y)], 10));
        }
        rows.extend(std::iter::repeat_n(vec![Some(a), None], 10));
    }
    PatternedDataset::from_rows(s, rows).unwrap()
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn symmetric_toy_curves_follow_the_closed_form() {
    let d = symmetric_toy();
    let odds = PatternDesigns::for_dataset(&d, DefaultDesign::MainEffects);
    let law = fit_complete_case_mle(&d, &LawSpec::DiscreteLoglinear { terms: vec![] }).unwrap();
    let est = EstimandSpec::mean(d.schema(), "Y").unwrap();
    let (mask, design) = parse_tilt(&d, "mask=10: phi*Y").unwrap();
    let spec = SelectionBiasSpec {
        features: vec![(mask, design)],
        grid: parse_grid("-1:1:0.5").unwrap(),
    };
    let curve = sweep(&d, &[Method::Ipw, Method::Pm, Method::Dr], &spec, &odds, Some(&law), &est).unwrap();
    assert_eq!(curve.points.len(), 5);
    for m in [Method::Ipw, Method::Pm, Method::Dr] {
        let series = curve.series(m, 0);
        assert_eq!(series.len(), 5);
        for &(phi, b) in &series {
            let want = (1.0 + expit(phi)) / 3.0;
            assert!((b - want).abs() < 1e-9, "{m} at {phi}: {b} vs {want}");
        }
        for k in 0..series.len() {
            let (phi, b) = series[k];
            let (mirror, bm) = series[series.len() - 1 - k];
            assert_eq!(phi, -mirror);
            assert!((b + bm - 2.0 * series[2].1).abs() < 1e-9);
        }
    }
}

#[test]
fn null_grid_reproduces_base_estimates() {
    let d = simulate_dataset(1500, 4, 0).unwrap();
    let odds = Scenario::Bth.odds_designs();
    let law = fit_complete_case_mle(&d, &Scenario::Bth.law_spec()).unwrap();
    let est = EstimandSpec::mean(d.schema(), "Y").unwrap();
    let spec = SelectionBiasSpec {
        features: vec![parse_tilt(&d, "mask=10: phi*Y").unwrap()],
        grid: vec![0.0],
    };
    let curve = sweep(&d, &[Method::Ipw, Method::Pm, Method::Dr], &spec, &odds, Some(&law), &est).unwrap();
    let fit = fit_pairwise_logistic(&d, &odds).unwrap();
    let base = [
        solve_ipw(&d, &fit, &est).unwrap(),
        solve_pm(&d, &law, &est).unwrap(),
        solve_dr(&d, &fit, &law, &est).unwrap(),
    ];
    assert_eq!(curve.points.len(), 1);
    for (got, want) in curve.points[0].reports.iter().zip(&base) {
        assert_eq!(got.method, want.method);
        assert!((got.beta_hat[0] - want.beta_hat[0]).abs() <= 1e-10);
    }
}

#[test]
fn one_failed_grid_point_is_recorded_not_fatal() {
    let d = simulate_dataset(1000, 4, 0).unwrap();
    let odds = Scenario::Bth.odds_designs();
    let est = EstimandSpec::mean(d.schema(), "Y").unwrap();
    // at φ = 400 the factor exp(400 Y) overflows for the larger Y values
    let spec = SelectionBiasSpec {
        features: vec![parse_tilt(&d, "mask=10: phi*Y").unwrap()],
        grid: vec![-1.0, -0.5, 0.0, 0.5, 400.0],
    };
    let curve = sweep(&d, &[Method::Ipw], &spec, &odds, None, &est).unwrap();
    let reports: usize = curve.points.iter().map(|p| p.reports.len()).sum();
    let failures: usize = curve.points.iter().map(|p| p.failures.len()).sum();
    assert_eq!((reports, failures), (4, 1));
    assert_eq!(curve.points[4].failures[0].method, Method::Ipw);
}

#[test]
fn grid_must_contain_zero_and_tilts_must_use_missing_values() {
    let d = simulate_dataset(500, 4, 0).unwrap();
    let est = EstimandSpec::mean(d.schema(), "Y").unwrap();
    let spec = SelectionBiasSpec {
        features: vec![parse_tilt(&d, "mask=10: phi*Y").unwrap()],
        grid: vec![0.5, 1.0],
    };
    assert!(sweep(&d, &[Method::Ipw], &spec, &Scenario::Bth.odds_designs(), None, &est).is_err());
    assert!(parse_tilt(&d, "mask=10: phi*X").is_err());
    assert!(parse_tilt(&d, "mask=11: phi*Y").is_err());
    assert!(parse_grid("1:-1:0.5").is_err());
    assert_eq!(parse_grid("-1:1:0.25").unwrap().len(), 9);
}

#[test]
fn null_tilt_reduces_every_estimator() {
    let d = simulate_dataset(1200, 19, 0).unwrap();
    let odds = Scenario::Bth.odds_designs();
    let law = fit_complete_case_mle(&d, &Scenario::Bth.law_spec()).unwrap();
    let est = EstimandSpec::mean(d.schema(), "Y").unwrap();
    let tilt = ExpTilt::new(0.0, vec![parse_tilt(&d, "mask=01: phi*X").unwrap()]).unwrap();
    let base = fit_pairwise_logistic(&d, &odds).unwrap();
    let tilted = fit_alpha_theta(&d, &odds, &tilt).unwrap();
    assert!((base.model().params() - tilted.model().params()).amax() <= 1e-10);
    let pairs = [
        (ipw_sens(&d, &tilted, &est, &tilt).unwrap(), solve_ipw(&d, &base, &est).unwrap()),
        (pm_sens(&d, &law, &est, &tilt).unwrap(), solve_pm(&d, &law, &est).unwrap()),
        (dr_sens(&d, &tilted, &law, &est, &tilt).unwrap(), solve_dr(&d, &base, &law, &est).unwrap()),
    ];
    for (s, b) in pairs {
        assert!((s.beta_hat[0] - b.beta_hat[0]).abs() <= 1e-10, "{}", s.method);
    }
}

#[test]
fn larger_tilt_shrinks_the_complete_case_probability() {
    let d = simulate_dataset(2000, 5, 0).unwrap();
    let odds = Scenario::Bth.odds_designs();
    let feature = parse_tilt(&d, "mask=10: phi*Y").unwrap();
    let fit = fit_pairwise_logistic(&d, &odds).unwrap();
    let model = fit.model().as_logit().unwrap();
    let row = [0.5, 3.0];
    let mut last = f64::INFINITY;
    for phi in [0.0, 0.5, 1.0, 2.0] {
        let tilt = ExpTilt::new(phi, vec![feature.clone()]).unwrap();
        let (pi1, _) = tilted_probabilities(model, &tilt, &row).unwrap();
        assert!(pi1 < last, "φ = {phi}: {pi1} not below {last}");
        last = pi1;
    }
}

proptest! {
    #[test]
    fn tilted_probabilities_sum_to_one(
        phi in -3.0f64..3.0,
        x in -3.0f64..3.0,
        y in -3.0f64..3.0,
        a in prop::collection::vec(-2.0f64..2.0, 5),
    ) {
        let designs = Scenario::Bth.odds_designs();
        let model = choicemiss::OddsModel::from_spec(
            &designs,
            vec![
                nalgebra::DVector::from_vec(vec![a[0], a[1]]),
                nalgebra::DVector::from_vec(vec![a[2], a[3]]),
                nalgebra::DVector::from_vec(vec![a[4]]),
            ],
        ).unwrap();
        let s = choicemiss::sim::schema();
        let tilt = ExpTilt::new(phi, vec![
            (PatternMask::parse("10").unwrap(), choicemiss::Design::parse(&s, &["Y"]).unwrap()),
            (PatternMask::parse("00").unwrap(), choicemiss::Design::parse(&s, &["X", "Y"]).unwrap()),
        ]).unwrap();
        let (pi1, rest) = tilted_probabilities(&model, &tilt, &[x, y]).unwrap();
        prop_assert!((pi1 + rest.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for mask in model.masks() {
            let t = tilt.theta(&mask, &[x, y]).unwrap();
            prop_assert!(t > 0.0);
            prop_assert_eq!(tilt.at(0.0).theta(&mask, &[x, y]).unwrap(), 1.0);
        }
    }
}
