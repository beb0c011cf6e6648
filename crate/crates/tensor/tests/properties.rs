use proptest::prelude::*;
use qfm_tensor::{checkpoint, ParamSet, Tape, Tensor};

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f32..50.0, r * c)
            .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix()) {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let s = t.softmax(v, 1).unwrap();
        let c = x.cols();
        for row in t.value(s).chunks(c) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layernorm_rows_are_standardized(x in matrix()) {
        prop_assume!(x.cols() >= 2);
        let c = x.cols();
        // skip rows that are (nearly) constant; eps dominates there
        prop_assume!(x.data().chunks(c).all(|r| {
            let m = r.iter().sum::<f32>() / c as f32;
            r.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / c as f32 > 1e-2
        }));
        let mut t = Tape::new();
        let v = t.constant(x);
        let g = t.constant(Tensor::ones(&[c]));
        let b = t.constant(Tensor::zeros(&[c]));
        let y = t.layernorm(v, g, b, 1e-6).unwrap();
        for row in t.value(y).chunks(c) {
            let m = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / c as f32;
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn checkpoint_round_trip(tensors in prop::collection::vec(matrix(), 1..5)) {
        let mut ps = ParamSet::new();
        for (i, t) in tensors.into_iter().enumerate() {
            ps.insert(format!("layer{i}/w"), t).unwrap();
        }
        let bytes = checkpoint::encode(&ps, &Default::default()).unwrap();
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert!(back.params.bit_eq(&ps));
    }
}
