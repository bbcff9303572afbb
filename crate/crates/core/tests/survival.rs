use proptest::prelude::*;

use survcl::survival::{
    assign_bin, c_index, c_index_ipcw, chi2_sf, compute_bins, default_tau, hazards_to_survival, km_estimator,
    log_rank_test, nll_survival_loss, risk_score, BinSpec, SurvLossConfig,
};
use survcl::Error;

#[test]
fn bin_boundary_examples() {
    let b = compute_bins(&[0.0, 1.0, 2.0, 3.0], &[false; 4], 4).unwrap();
    let want = [0.75, 1.5, 2.25];
    assert!(b.boundaries().iter().zip(want).all(|(x, y)| (x - y).abs() < 1e-12));
    let times: Vec<f64> = (1..=8).map(f64::from).collect();
    assert_eq!(compute_bins(&times, &[false; 8], 2).unwrap().boundaries(), &[4.5]);
    assert!(compute_bins(&[2.0; 5], &[false; 5], 4).is_err());
}

#[test]
fn bins_are_right_open() {
    let b = BinSpec::new(3, vec![1.0, 2.0]).unwrap();
    assert_eq!(assign_bin(0.5, &b), 0);
    assert_eq!(assign_bin(1.0, &b), 1);
    assert_eq!(assign_bin(7.0, &b), 2);
}

#[test]
fn survival_and_risk_examples() {
    assert_eq!(hazards_to_survival(&[0.0; 4]).unwrap(), vec![1.0; 4]);
    assert_eq!(hazards_to_survival(&[1.0, 0.3, 0.2]).unwrap(), vec![0.0; 3]);
    assert_eq!(hazards_to_survival(&[0.5, 0.5]).unwrap(), vec![0.5, 0.25]);
    assert_eq!(risk_score(&[0.0; 4]).unwrap(), -4.0);
    assert_eq!(risk_score(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
    assert_eq!(risk_score(&[0.5, 0.5]).unwrap(), -0.75);
}

#[test]
fn concordance_examples() {
    assert_eq!(c_index(&[0.9, 0.1], &[2.0, 5.0], &[false, false]).unwrap(), 1.0);
    assert_eq!(c_index(&[0.3; 4], &[1.0, 2.0, 3.0, 4.0], &[false; 4]).unwrap(), 0.5);
    assert_eq!(c_index_ipcw(&[0.9, 0.1], &[2.0, 5.0], &[false, false], 5.0).unwrap(), 1.0);
    assert!(matches!(c_index(&[0.1, 0.2], &[1.0, 2.0], &[true, true]), Err(Error::UndefinedMetric(_))));
}

#[test]
fn identical_groups_do_not_differ() {
    let t = [1.0, 2.0, 3.0, 5.0];
    let e = [true, false, true, true];
    let lr = log_rank_test(&t, &e, &t, &e).unwrap();
    assert!(lr.chi2.abs() < 1e-15);
    assert!((lr.p_value - 1.0).abs() < 1e-12);
    assert!(matches!(log_rank_test(&[], &[], &t, &e), Err(Error::UndefinedTest(_))));
}

#[test]
fn chi_square_tail() {
    assert_eq!(chi2_sf(0.0, 1.0).unwrap(), 1.0);
    let mut prev = 1.0;
    for x in [0.5, 1.0, 4.0, 10.0, 30.0, 100.0] {
        let p = chi2_sf(x, 1.0).unwrap();
        assert!(p < prev);
        prev = p;
    }
    assert!(prev < 1e-20);
    for x in [0.01, 0.3, 1.0, 2.7, 6.63, 15.0] {
        let want = statrs::function::erf::erfc((x / 2.0f64).sqrt());
        assert!((chi2_sf(x, 1.0).unwrap() - want).abs() < 1e-10, "x = {x}");
    }
    assert!(chi2_sf(-1.0, 1.0).is_err());
}

#[test]
fn censored_loss_weighting() {
    let h = [0.2, 0.4, 0.7];
    let full = nll_survival_loss(&h, 1, true, SurvLossConfig { alpha_s: 0.0 }).unwrap();
    let want = -((1.0f64 - 0.2) * (1.0 - 0.4)).ln();
    assert!((full - want).abs() < 1e-12);
    let event = nll_survival_loss(&h, 2, false, SurvLossConfig::default()).unwrap();
    let want = -((0.8f64 * 0.6).ln() + 0.7f64.ln());
    assert!((event - want).abs() < 1e-12);
    assert!(nll_survival_loss(&h, 3, false, SurvLossConfig::default()).is_err());
}

fn cases() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(0.1f64..10.0, n),
            prop::collection::vec(prop::bool::weighted(0.3), n),
        )
    })
}

proptest! {
    #[test]
    fn c_index_is_a_fraction_and_rank_based((r, t, c) in cases()) {
        if let Ok(ci) = c_index(&r, &t, &c) {
            prop_assert!((0.0..=1.0).contains(&ci));
            let shifted: Vec<f64> = r.iter().map(|x| 3.0 * x.exp() + 1.0).collect();
            prop_assert_eq!(c_index(&shifted, &t, &c).unwrap(), ci);
            let flipped: Vec<f64> = r.iter().map(|x| -x).collect();
            prop_assert!((c_index(&flipped, &t, &c).unwrap() - (1.0 - ci)).abs() < 1e-12);
        }
    }

    #[test]
    fn ipcw_without_censoring_is_plain((r, t, _c) in cases()) {
        let none = vec![false; t.len()];
        let tau = default_tau(&t, &none).unwrap() + 1.0;
        if let Ok(ci) = c_index(&r, &t, &none) {
            prop_assert_eq!(c_index_ipcw(&r, &t, &none, tau).unwrap(), ci);
        }
    }

    #[test]
    fn survival_is_nonincreasing(h in prop::collection::vec(0.0f64..=1.0, 1..10)) {
        let s = hazards_to_survival(&h).unwrap();
        prop_assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn km_curve_is_a_step_down((_r, t, c) in cases()) {
        let events: Vec<bool> = c.iter().map(|x| !x).collect();
        let km = km_estimator(&t, &events).unwrap();
        prop_assert!(km.points.windows(2).all(|w| w[1].survival <= w[0].survival && w[1].time > w[0].time));
        prop_assert_eq!(km.points.iter().map(|p| p.events).sum::<usize>(), events.iter().filter(|&&e| e).count());
    }

    #[test]
    fn assign_bin_matches_linear_scan(mut b in prop::collection::vec(0.0f64..10.0, 1..6), t in -1.0f64..12.0) {
        b.sort_by(f64::total_cmp);
        b.dedup();
        let spec = BinSpec::new(b.len() + 1, b.clone()).unwrap();
        let scan = b.iter().filter(|&&x| t >= x).count();
        prop_assert_eq!(assign_bin(t, &spec), scan);
    }
}
