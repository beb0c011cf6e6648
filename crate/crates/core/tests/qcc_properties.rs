use proptest::prelude::*;
use qfm_core::model::FeatureMap;
use qfm_core::qcc::{mix_features, mix_labels, LabelMixWeights, MixWeights};
use qfm_tensor::Tensor;

fn map(rows: usize, dim: usize, v: Vec<f32>) -> FeatureMap {
    FeatureMap::new(Tensor::new(vec![rows, dim], v).unwrap()).unwrap()
}

fn maps(rows: usize, dim: usize, count: std::ops::Range<usize>) -> impl Strategy<Value = Vec<FeatureMap>> {
    prop::collection::vec(prop::collection::vec(-10.0f32..10.0, rows * dim), count)
        .prop_map(move |vs| vs.into_iter().map(|v| map(rows, dim, v)).collect())
}

fn case() -> impl Strategy<Value = (FeatureMap, Vec<FeatureMap>, Vec<FeatureMap>, f64, f64)> {
    (1usize..4, 1usize..6).prop_flat_map(|(r, d)| {
        (
            maps(r, d, 1..2).prop_map(|mut v| v.remove(0)),
            maps(r, d, 0..4),
            maps(r, d, 0..4),
            0.0f64..0.5,
            0.0f64..0.45,
        )
    })
}

proptest! {
    /// Every mixed element is a convex combination of the inputs at that
    /// position, so it stays inside their range.
    #[test]
    fn mix_stays_in_convex_hull((f, a, b, l1, l2) in case()) {
        let w = MixWeights::new(l1, l2, 4).unwrap();
        let out = mix_features(&f, &a, &b, &w).unwrap();
        let n = f.tokens().numel();
        for i in 0..n {
            let vals: Vec<f32> = std::iter::once(&f).chain(&a).chain(&b).map(|m| m.tokens().data()[i]).collect();
            let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let v = out.tokens().data()[i];
            prop_assert!(v >= lo - 1e-5 * (1.0 + lo.abs()) && v <= hi + 1e-5 * (1.0 + hi.abs()), "{} not in [{}, {}]", v, lo, hi);
        }
    }

    #[test]
    fn mix_matches_direct_formula((f, a, b, l1, l2) in case()) {
        let w = MixWeights::new(l1, l2, 4).unwrap();
        let out = mix_features(&f, &a, &b, &w).unwrap();
        let l1e = if a.is_empty() { 0.0 } else { l1 };
        let l2e = if b.is_empty() { 0.0 } else { l2 };
        for i in 0..f.tokens().numel() {
            let mean = |l: &[FeatureMap]| l.iter().map(|m| m.tokens().data()[i] as f64).sum::<f64>() / l.len().max(1) as f64;
            let want = (1.0 - l1e - l2e) * f.tokens().data()[i] as f64 + l1e * mean(&a) + l2e * mean(&b);
            prop_assert!((out.tokens().data()[i] as f64 - want).abs() <= 1e-5 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn zero_weights_are_the_identity((f, a, b, _, _) in case()) {
        let w = MixWeights::new(0.0, 0.0, 4).unwrap();
        let out = mix_features(&f, &a, &b, &w).unwrap();
        prop_assert!(out.tokens().data().iter().zip(f.tokens().data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn label_mix_is_convex(y in 0.0f32..100.0, y1 in 0.0f32..100.0, y2 in 0.0f32..100.0, b1 in 0.0f64..0.5, b2 in 0.0f64..0.49) {
        let m = mix_labels(y, y1, y2, LabelMixWeights::new(b1, b2).unwrap());
        let lo = y.min(y1).min(y2);
        let hi = y.max(y1).max(y2);
        prop_assert!(m >= lo - 1e-3 && m <= hi + 1e-3);
    }
}

#[test]
fn invalid_weights_are_rejected() {
    assert!(MixWeights::new(0.6, 0.5, 1).is_err());
    assert!(MixWeights::new(-0.1, 0.0, 1).is_err());
    assert!(MixWeights::new(0.1, 0.1, 0).is_err());
    assert!(LabelMixWeights::new(0.5, 0.5).is_err());
}

#[test]
fn too_many_matches_are_rejected() {
    let f = map(1, 2, vec![1.0, 2.0]);
    let a = vec![f.clone(), f.clone()];
    let w = MixWeights::new(0.1, 0.1, 1).unwrap();
    assert!(mix_features(&f, &a, &[], &w).is_err());
}
