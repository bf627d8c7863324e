//! Central finite-difference oracle for every layer kind, on random 4x4
//! inputs in double precision. h = 1e-5, relative tolerance 1e-4.

mod common;

use common::*;
use fedroute_nn::{GradientSet, LayerKind, ModelWeights, NodeInput, Tensor4D};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check_model(model: &ModelWeights, x: &Tensor4D, proj: &Tensor4D) {
    // analytic gradients through a train-mode forward
    let mut m = model.clone();
    let (_, tape) = m.forward_train(x).unwrap();
    let grads = m.backward(&tape, proj).unwrap();
    let analytic = grads_by_layer(&m, &grads);
    // F trains its own clone each evaluation, so running stats never leak
    let loss = |candidate: &ModelWeights| -> f64 {
        let mut c = candidate.clone();
        let (y, _) = c.forward_train(x).unwrap();
        loss_value(&y, proj)
    };
    fd_grad_check(model, &loss, &analytic, H, TOL);
}

#[test]
fn conv3x3_gradients() {
    let mut r = rng(1);
    let model = ModelWeights::new(vec![conv_layer(
        &mut r,
        "c",
        LayerKind::Conv3x3,
        2,
        3,
        vec![NodeInput::Image],
    )])
    .unwrap();
    let x = random_tensor(&mut r, [2, 2, 4, 4]);
    let proj = projection(&mut r, [2, 3, 4, 4]);
    check_model(&model, &x, &proj);
}

#[test]
fn conv1x1_gradients() {
    let mut r = rng(2);
    let model = ModelWeights::new(vec![conv_layer(
        &mut r,
        "c",
        LayerKind::Conv1x1,
        3,
        2,
        vec![NodeInput::Image],
    )])
    .unwrap();
    let x = random_tensor(&mut r, [2, 3, 4, 4]);
    let proj = projection(&mut r, [2, 2, 4, 4]);
    check_model(&model, &x, &proj);
}

#[test]
fn batchnorm_train_mode_gradients() {
    let mut r = rng(3);
    let model = ModelWeights::new(vec![
        conv_layer(&mut r, "c", LayerKind::Conv3x3, 1, 2, vec![NodeInput::Image]),
        bn_layer(&mut r, "bn", 2, vec![NodeInput::Node(0)]),
    ])
    .unwrap();
    let x = random_tensor(&mut r, [3, 1, 4, 4]);
    let proj = projection(&mut r, [3, 2, 4, 4]);
    check_model(&model, &x, &proj);
}

#[test]
fn batchnorm_eval_mode_gradients() {
    let mut r = rng(4);
    let model = ModelWeights::new(vec![
        conv_layer(&mut r, "c", LayerKind::Conv3x3, 1, 2, vec![NodeInput::Image]),
        bn_layer(&mut r, "bn", 2, vec![NodeInput::Node(0)]),
    ])
    .unwrap();
    let x = random_tensor(&mut r, [2, 1, 4, 4]);
    let proj = projection(&mut r, [2, 2, 4, 4]);
    let (_, tape) = model.forward_eval(&x).unwrap();
    let grads = model.backward(&tape, &proj).unwrap();
    let analytic = grads_by_layer(&model, &grads);
    let loss = |candidate: &ModelWeights| -> f64 {
        let (y, _) = candidate.forward_eval(&x).unwrap();
        loss_value(&y, &proj)
    };
    fd_grad_check(&model, &loss, &analytic, H, TOL);
}

#[test]
fn relu_maxpool_upsample_softmax_chain_gradients() {
    // parameter-free layers are exercised through the conv below them
    let mut r = rng(5);
    let model = ModelWeights::new(vec![
        conv_layer(&mut r, "c1", LayerKind::Conv3x3, 1, 3, vec![NodeInput::Image]),
        stateless_layer("relu", LayerKind::Relu, 3, vec![NodeInput::Node(0)]),
        stateless_layer("pool", LayerKind::MaxPool2, 3, vec![NodeInput::Node(1)]),
        stateless_layer("up", LayerKind::Upsample2Nearest, 3, vec![NodeInput::Node(2)]),
        conv_layer(&mut r, "c2", LayerKind::Conv1x1, 3, 2, vec![NodeInput::Node(3)]),
        stateless_layer("sm", LayerKind::SoftmaxChannel, 2, vec![NodeInput::Node(4)]),
    ])
    .unwrap();
    let x = random_tensor(&mut r, [2, 1, 4, 4]);
    let proj = projection(&mut r, [2, 2, 4, 4]);
    check_model(&model, &x, &proj);
}

#[test]
fn skip_connection_concat_gradients() {
    let mut r = rng(6);
    let model = ModelWeights::new(vec![
        conv_layer(&mut r, "a", LayerKind::Conv3x3, 2, 2, vec![NodeInput::Image]),
        conv_layer(&mut r, "b", LayerKind::Conv3x3, 2, 2, vec![NodeInput::Node(0)]),
        // concat of node output and raw image, as in U-Net skips
        conv_layer(
            &mut r,
            "merge",
            LayerKind::Conv3x3,
            4,
            2,
            vec![NodeInput::Node(1), NodeInput::Image],
        ),
    ])
    .unwrap();
    let x = random_tensor(&mut r, [2, 2, 4, 4]);
    let proj = projection(&mut r, [2, 2, 4, 4]);
    check_model(&model, &x, &proj);
}

#[test]
fn constant_loss_gives_zero_gradients() {
    let mut r = rng(7);
    let mut model = ModelWeights::new(vec![
        conv_layer(&mut r, "c", LayerKind::Conv3x3, 1, 2, vec![NodeInput::Image]),
        bn_layer(&mut r, "bn", 2, vec![NodeInput::Node(0)]),
    ])
    .unwrap();
    let x = random_tensor(&mut r, [1, 1, 4, 4]);
    let (y, tape) = model.forward_train(&x).unwrap();
    let grads = model.backward(&tape, &Tensor4D::zeros(y.shape())).unwrap();
    assert_eq!(grads.max_abs(), 0.0);
}

#[test]
fn backward_is_linear_in_loss_grad() {
    let mut r = rng(8);
    let mut model = ModelWeights::new(vec![
        conv_layer(&mut r, "c", LayerKind::Conv3x3, 1, 2, vec![NodeInput::Image]),
        bn_layer(&mut r, "bn", 2, vec![NodeInput::Node(0)]),
        stateless_layer("relu", LayerKind::Relu, 2, vec![NodeInput::Node(1)]),
    ])
    .unwrap();
    let x = random_tensor(&mut r, [2, 1, 4, 4]);
    let g = random_tensor(&mut r, [2, 2, 4, 4]);
    let mut g2 = g.clone();
    for v in g2.data_mut() {
        *v *= 2.0;
    }
    let (_, tape) = model.forward_train(&x).unwrap();
    let once = model.backward(&tape, &g).unwrap();
    let twice = model.backward(&tape, &g2).unwrap();
    let mut doubled = once.clone();
    doubled.scale(2.0);
    let a = doubled.to_flat();
    let b = twice.to_flat();
    for (x1, x2) in a.iter().zip(&b) {
        assert!((x1 - x2).abs() <= 1e-12 * x1.abs().max(1.0));
    }
}

#[test]
fn stale_tape_is_rejected() {
    let mut r = rng(9);
    let mut model = ModelWeights::new(vec![conv_layer(
        &mut r,
        "c",
        LayerKind::Conv3x3,
        1,
        1,
        vec![NodeInput::Image],
    )])
    .unwrap();
    let x = random_tensor(&mut r, [1, 1, 4, 4]);
    let (y, tape) = model.forward_train(&x).unwrap();
    // mutate a weight after the forward pass
    common::perturb(&mut model, 0, 0, 0.5);
    let mut g = GradientSet::zeros_like(&model);
    g.scale(0.0);
    assert!(model.backward(&tape, &Tensor4D::zeros(y.shape())).is_err());
}
