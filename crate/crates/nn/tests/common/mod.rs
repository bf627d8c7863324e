//! Shared helpers for the engine test suites.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use fedroute_nn::rng::derive_rng;
use fedroute_nn::{Layer, LayerKind, LayerParams, LayerSpec, ModelWeights, NodeInput, Tensor4D};

pub fn rng(seed: u64) -> ChaCha8Rng {
    derive_rng(seed, "test", &[])
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4D {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    Tensor4D::from_vec(shape, data).unwrap()
}

pub fn conv_layer(
    rng: &mut ChaCha8Rng,
    name: &str,
    kind: LayerKind,
    cin: usize,
    cout: usize,
    inputs: Vec<NodeInput>,
) -> Layer {
    let k = if kind == LayerKind::Conv3x3 { 3 } else { 1 };
    let weight = random_tensor(rng, [cout, cin, k, k]);
    let bias: Vec<f64> = (0..cout).map(|_| rng.gen::<f64>() - 0.5).collect();
    Layer {
        name: name.into(),
        spec: LayerSpec {
            kind,
            in_channels: cin,
            out_channels: cout,
        },
        params: LayerParams::Conv { weight, bias },
        inputs,
    }
}

pub fn bn_layer(rng: &mut ChaCha8Rng, name: &str, channels: usize, inputs: Vec<NodeInput>) -> Layer {
    Layer {
        name: name.into(),
        spec: LayerSpec {
            kind: LayerKind::BatchNorm,
            in_channels: channels,
            out_channels: channels,
        },
        params: LayerParams::BatchNorm {
            gamma: (0..channels).map(|_| 0.5 + rng.gen::<f64>()).collect(),
            beta: (0..channels).map(|_| rng.gen::<f64>() - 0.5).collect(),
            running_mean: (0..channels).map(|_| rng.gen::<f64>() - 0.5).collect(),
            running_var: (0..channels).map(|_| 0.5 + rng.gen::<f64>()).collect(),
        },
        inputs,
    }
}

pub fn stateless_layer(name: &str, kind: LayerKind, channels: usize, inputs: Vec<NodeInput>) -> Layer {
    Layer {
        name: name.into(),
        spec: LayerSpec {
            kind,
            in_channels: channels,
            out_channels: channels,
        },
        params: LayerParams::None,
        inputs,
    }
}

/// Scalar test loss: seeded random projection of the logits.
pub fn projection(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4D {
    random_tensor(rng, shape)
}

pub fn loss_value(logits: &Tensor4D, proj: &Tensor4D) -> f64 {
    logits
        .data()
        .iter()
        .zip(proj.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Relative-error comparison with an absolute guard for near-zero pairs.
pub fn rel_err_ok(analytic: f64, fd: f64, tol: f64) -> bool {
    let scale = analytic.abs().max(fd.abs());
    if scale < 1e-10 {
        return true;
    }
    (analytic - fd).abs() <= tol * scale
}

/// Central finite differences over every trainable parameter of `model`.
/// `loss` must be a pure function of the model (clones are passed in).
pub fn fd_grad_check(
    model: &ModelWeights,
    loss: &dyn Fn(&ModelWeights) -> f64,
    analytic: &[(String, Vec<f64>)],
    h: f64,
    tol: f64,
) {
    for (layer_idx, layer) in model.layers().iter().enumerate() {
        let slots: usize = match &layer.params {
            LayerParams::Conv { weight, bias } => weight.len() + bias.len(),
            LayerParams::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
            LayerParams::None => 0,
        };
        for slot in 0..slots {
            let mut plus = model.clone();
            perturb(&mut plus, layer_idx, slot, h);
            let mut minus = model.clone();
            perturb(&mut minus, layer_idx, slot, -h);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic[layer_idx].1[slot];
            assert!(
                rel_err_ok(a, fd, tol),
                "layer `{}` ({}) slot {}: analytic {} vs fd {}",
                layer.name,
                layer.spec.kind.as_str(),
                slot,
                a,
                fd
            );
        }
    }
}

pub fn perturb(model: &mut ModelWeights, layer_idx: usize, slot: usize, delta: f64) {
    match &mut model.layers_mut()[layer_idx].params {
        LayerParams::Conv { weight, bias } => {
            let wl = weight.len();
            if slot < wl {
                weight.data_mut()[slot] += delta;
            } else {
                bias[slot - wl] += delta;
            }
        }
        LayerParams::BatchNorm { gamma, beta, .. } => {
            let gl = gamma.len();
            if slot < gl {
                gamma[slot] += delta;
            } else {
                beta[slot - gl] += delta;
            }
        }
        LayerParams::None => {}
    }
}

/// Flattens a gradient set into per-layer (name, trainable values) in the
/// same slot order used by `perturb`.
pub fn grads_by_layer(model: &ModelWeights, grads: &fedroute_nn::GradientSet) -> Vec<(String, Vec<f64>)> {
    model
        .layers()
        .iter()
        .zip(&grads.layers)
        .map(|(l, g)| {
            let vals = match g {
                fedroute_nn::LayerGrad::Conv { weight, bias } => {
                    let mut v = weight.data().to_vec();
                    v.extend_from_slice(bias);
                    v
                }
                fedroute_nn::LayerGrad::BatchNorm { gamma, beta } => {
                    let mut v = gamma.clone();
                    v.extend_from_slice(beta);
                    v
                }
                fedroute_nn::LayerGrad::None => vec![],
            };
            (l.name.clone(), vals)
        })
        .collect()
}
