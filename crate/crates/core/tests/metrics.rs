mod common;

use ctxalign::metrics::{
    accuracy, m4_metrics, mase, naive2, point_metrics, seasonal_indices, smape, ForecastAccumulator, MaseScaling,
    SeasonalityTest,
};
use ctxalign::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::metric_ref;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + b.abs())
}

#[test]
fn random_cases_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..100 {
        let h = rng.gen_range(1..20);
        let s = rng.gen_range(1..5);
        let n = rng.gen_range(s + 2..60);
        let series: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..100.0)).collect();
        let y: Vec<f64> = (0..h).map(|_| rng.gen_range(1.0..100.0)).collect();
        let f: Vec<f64> = (0..h).map(|_| rng.gen_range(1.0..100.0)).collect();
        let (mse, mae) = point_metrics(&y, &f).unwrap();
        assert!(close(mse, metric_ref::mse(&y, &f)), "case {case}");
        assert!(close(mae, metric_ref::mae(&y, &f)), "case {case}");
        assert!(close(smape(&y, &f).unwrap(), metric_ref::smape(&y, &f)), "case {case}");
        let m = mase(&y, &f, &series, s, MaseScaling::Insample).unwrap();
        assert!(close(m, metric_ref::mase(&y, &f, &series, s)), "case {case}");
        if h > s {
            let m = mase(&y, &f, &series, s, MaseScaling::ForecastWindow).unwrap();
            assert!(close(m, metric_ref::mase(&y, &f, &y, s)), "case {case}");
        }
        let n2 = naive2(&series, h, s, SeasonalityTest::Acf90).unwrap();
        let r = m4_metrics(&y, &f, &series, s, &n2, MaseScaling::Insample).unwrap();
        let want = metric_ref::owa(
            metric_ref::smape(&y, &f),
            metric_ref::mase(&y, &f, &series, s),
            metric_ref::smape(&y, &n2),
            metric_ref::mase(&y, &n2, &series, s),
        );
        assert!(close(r.owa, want), "case {case}");
    }
}

proptest! {
    #[test]
    fn relative_metrics_are_scale_invariant(
        pairs in prop::collection::vec((1.0f64..50.0, 1.0f64..50.0), 2..12),
        c in 0.01f64..100.0,
    ) {
        let (y, f): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (ys, fs): (Vec<f64>, Vec<f64>) = (y.iter().map(|v| v * c).collect(), f.iter().map(|v| v * c).collect());
        let a = smape(&y, &f).unwrap();
        prop_assert!((a - smape(&ys, &fs).unwrap()).abs() <= 1e-9 * (1.0 + a));
        if let Ok(m) = mase(&y, &f, &[], 1, MaseScaling::ForecastWindow) {
            let ms = mase(&ys, &fs, &[], 1, MaseScaling::ForecastWindow).unwrap();
            prop_assert!((m - ms).abs() <= 1e-9 * (1.0 + m));
        }
        let (mse, _) = point_metrics(&y, &f).unwrap();
        let (mse_s, _) = point_metrics(&ys, &fs).unwrap();
        prop_assert!((mse * c * c - mse_s).abs() <= 1e-9 * (1.0 + mse_s));
    }

    #[test]
    fn smape_is_bounded(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..12)) {
        let (y, f): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let v = smape(&y, &f).unwrap();
        prop_assert!((0.0..=200.0).contains(&v));
    }
}

#[test]
fn naive2_recovers_an_exact_multiplicative_season() {
    let si = [0.8, 1.2, 0.9, 1.1];
    let x: Vec<f64> = (0..24).map(|t| 50.0 * si[t % 4]).collect();
    let idx = seasonal_indices(&x, 4).unwrap();
    for (a, b) in idx.iter().zip(si) {
        assert!((a - b).abs() < 1e-12);
    }
    let f = naive2(&x, 6, 4, SeasonalityTest::Always).unwrap();
    for (k, v) in f.iter().enumerate() {
        assert!((v - 50.0 * si[(24 + k) % 4]).abs() < 1e-9);
    }
}

#[test]
fn naive2_without_seasonality_repeats_the_last_value() {
    let x = [3.0, 1.0, 4.0, 1.0, 5.0];
    assert_eq!(naive2(&x, 3, 1, SeasonalityTest::Acf90).unwrap(), vec![5.0; 3]);
    // too short for the 3s rule
    assert_eq!(naive2(&x, 2, 4, SeasonalityTest::Acf90).unwrap(), vec![5.0; 2]);
}

#[test]
fn constant_history_has_no_mase_scale() {
    let err = mase(&[1.0], &[2.0], &[4.0, 4.0, 4.0], 1, MaseScaling::Insample).unwrap_err();
    assert!(matches!(err, Error::ConstantSeasonalSeries));
}

#[test]
fn mismatched_lengths_are_rejected() {
    assert!(point_metrics(&[1.0], &[1.0, 2.0]).is_err());
    assert!(smape(&[], &[]).is_err());
    assert!(accuracy(&[1], &[1, 0]).is_err());
}

#[test]
fn accumulator_reports_per_step_errors() {
    let mut acc = ForecastAccumulator::default();
    acc.push(&[1.0, 2.0], &[1.0, 4.0]).unwrap();
    acc.push(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
    assert_eq!(acc.windows(), 2);
    assert_eq!(acc.per_horizon(), vec![(0.5, 0.5), (2.0, 1.0)]);
    assert_eq!(acc.aggregate(), (1.25, 0.75));
}
