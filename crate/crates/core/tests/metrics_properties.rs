mod common;

use proptest::prelude::*;
use qfm_core::metrics::{plcc, srcc, MetricReport, RepeatMetrics};

/// Vectors with a deliberate share of tied values.
fn tied(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..6).prop_map(|v| v as f64), n),
            prop::collection::vec(-50.0f64..50.0, n),
        )
    })
}

fn distinct(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| (prop::collection::vec(-1e3f64..1e3, n), prop::collection::vec(-1e3f64..1e3, n)))
}

fn varies(v: &[f64]) -> bool {
    v.iter().any(|&x| x != v[0])
}

proptest! {
    #[test]
    fn agrees_with_reference((x, y) in distinct(2..500)) {
        prop_assume!(varies(&x) && varies(&y));
        prop_assert!((plcc(&x, &y).unwrap() - common::pearson(&x, &y)).abs() <= 1e-9);
        prop_assert!((srcc(&x, &y).unwrap() - common::spearman(&x, &y)).abs() <= 1e-9);
    }

    #[test]
    fn agrees_with_reference_under_ties((x, y) in tied(2..200)) {
        prop_assume!(varies(&x) && varies(&y));
        prop_assert!((srcc(&x, &y).unwrap() - common::spearman(&x, &y)).abs() <= 1e-9);
        prop_assert!((srcc(&y, &x).unwrap() - common::spearman(&x, &y)).abs() <= 1e-9);
    }

    #[test]
    fn srcc_ignores_monotone_transforms((x, y) in distinct(2..200)) {
        prop_assume!(varies(&x) && varies(&y));
        let s = srcc(&x, &y).unwrap();
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v + 3.0 * v).collect();
        let squashed: Vec<f64> = y.iter().map(|v| (v / 100.0).tanh()).collect();
        prop_assume!(varies(&squashed));
        prop_assert!((srcc(&cubed, &squashed).unwrap() - s).abs() <= 1e-12);
    }

    #[test]
    fn plcc_is_affine_invariant((x, y) in distinct(3..100), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        prop_assume!(varies(&x) && varies(&y));
        let t: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((plcc(&t, &y).unwrap() - plcc(&x, &y).unwrap()).abs() <= 1e-9);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((plcc(&neg, &y).unwrap() + plcc(&x, &y).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn correlations_are_bounded((x, y) in tied(2..100)) {
        prop_assume!(varies(&x) && varies(&y));
        for r in [plcc(&x, &y).unwrap(), srcc(&x, &y).unwrap()] {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}

#[test]
fn constant_input_is_an_error() {
    assert!(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(srcc(&[1.0, 2.0], &[5.0, 5.0]).is_err());
    assert!(plcc(&[1.0], &[1.0]).is_err());
}

#[test]
fn repeat_aggregation_reports_mean_and_median() {
    let reps = [0.5, 0.9, 0.7]
        .iter()
        .enumerate()
        .map(|(i, &v)| RepeatMetrics {
            repeat: i,
            plcc: v,
            srcc: v,
            n: 10,
        })
        .collect();
    let r = MetricReport::from_repeats(reps).unwrap();
    assert!((r.srcc - 0.7).abs() < 1e-12);
    assert_eq!(r.srcc_summary.median, 0.7);
    assert!((r.srcc_summary.std - 0.2).abs() < 1e-12);
}
