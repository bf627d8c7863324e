//! Property tests for the engine invariants.

mod common;

use proptest::prelude::*;

use common::{conv_layer, random_tensor, rng};
use fedroute_nn::layer::softmax_channel_forward;
use fedroute_nn::{average_models, LayerKind, ModelWeights, NodeInput, Tensor4D};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let x = Tensor4D::from_vec([1, 3, 2, 2], values).unwrap();
        let p = softmax_channel_forward(&x);
        for v in p.data() {
            prop_assert!(*v >= 0.0 && *v <= 1.0);
        }
        for i in 0..4 {
            let s: f64 = (0..3).map(|c| p.plane(0, c)[i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_inputs_give_finite_outputs(seed in 0u64..1000) {
        let mut r = rng(seed);
        let model = ModelWeights::new(vec![
            conv_layer(&mut r, "c", LayerKind::Conv3x3, 1, 2, vec![NodeInput::Image]),
        ]).unwrap();
        let x = random_tensor(&mut r, [1, 1, 4, 4]);
        let (y, _) = model.forward_eval(&x).unwrap();
        prop_assert!(y.all_finite());
    }

    #[test]
    fn model_average_commutes_with_forward_for_single_conv(seed in 0u64..1000) {
        // linearity of conv in its kernel, stated at the model level
        let mut r = rng(seed);
        let a = ModelWeights::new(vec![
            conv_layer(&mut r, "c", LayerKind::Conv3x3, 1, 2, vec![NodeInput::Image]),
        ]).unwrap();
        let b = ModelWeights::new(vec![
            conv_layer(&mut r, "c", LayerKind::Conv3x3, 1, 2, vec![NodeInput::Image]),
        ]).unwrap();
        let avg = average_models(&[&a, &b]).unwrap();
        let x = random_tensor(&mut r, [1, 1, 4, 4]);
        let (ya, _) = a.forward_eval(&x).unwrap();
        let (yb, _) = b.forward_eval(&x).unwrap();
        let (yavg, _) = avg.forward_eval(&x).unwrap();
        for ((va, vb), vm) in ya.data().iter().zip(yb.data()).zip(yavg.data()) {
            prop_assert!((0.5 * (va + vb) - vm).abs() < 1e-10);
        }
    }
}
