//! Shared fixtures for the simulator test suites.
#![allow(dead_code)]

use fedroute_core::data::ClientShift;
use fedroute_core::experiment::{
    DataSection, ExperimentConfig, FederationSection, PersonalizationSection, RoutingSection,
    SeedsSection,
};
use fedroute_nn::rng::derive_rng;
use fedroute_nn::{Layer, LayerKind, LayerParams, LayerSpec, ModelWeights, NodeInput, Tensor4D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn shift(scale: f64, offset: f64, noise: f64, freq: f64, n_samples: usize) -> ClientShift {
    ClientShift {
        intensity_scale: scale,
        intensity_offset: offset,
        noise_sigma: noise,
        texture_freq: freq,
        fg_radius_range: (3.0, 5.0),
        eccentricity_range: (0.0, 0.4),
        n_samples,
    }
}

/// A fast federation: 2 inside clients + 1 outside, 16x16 images, width 4.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        federation: FederationSection {
            rounds: 2,
            local_epochs: 1,
            batch_size: 4,
            lr_local: 1e-3,
            lr_global: 1e-3,
            optimizer: "sgd".into(),
            augment: true,
            checkpoint_every: 0,
            include_single_site: false,
        },
        personalization: PersonalizationSection {
            variant: "ema-update".into(),
            tau: 0.9,
        },
        routing: RoutingSection {
            beta: 0.01,
            window_radius: 2,
            epochs: 1,
            adapt_lr: 1e-3,
            adapt_batch: 4,
            noise_sigma: 0.5,
        },
        data: DataSection {
            classes: 2,
            image_size: 16,
            model_width: 4,
            split: (0.64, 0.16, 0.20),
            inside_shifts: vec![
                shift(1.0, 0.0, 0.05, 2.0, 12),
                shift(-1.0, 0.2, 0.15, 4.0, 12),
            ],
            outside_shift: shift(-0.9, 0.1, 0.25, 3.0, 12),
        },
        seeds: SeedsSection { master: 11, count: 1 },
        output_dir: "unused".into(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    derive_rng(seed, "test", &[])
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4D {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    Tensor4D::from_vec(shape, data).unwrap()
}

/// Random probability map: positive entries, per-pixel channel sum 1.
pub fn random_probs(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4D {
    let mut t = random_tensor(rng, shape);
    let [n, c, h, w] = shape;
    for b in 0..n {
        for i in 0..h * w {
            let mut sum = 0.0;
            for ch in 0..c {
                let idx = t.idx(b, ch, 0, 0) + i;
                let v = t.data()[idx].abs() + 0.05;
                t.data_mut()[idx] = v;
                sum += v;
            }
            for ch in 0..c {
                let idx = t.idx(b, ch, 0, 0) + i;
                t.data_mut()[idx] /= sum;
            }
        }
    }
    t
}

fn conv_layer(
    rng: &mut ChaCha8Rng,
    name: &str,
    kind: LayerKind,
    cin: usize,
    cout: usize,
    inputs: Vec<NodeInput>,
    scale: f64,
) -> Layer {
    let k = if kind == LayerKind::Conv3x3 { 3 } else { 1 };
    let data: Vec<f64> = (0..cout * cin * k * k)
        .map(|_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
        .collect();
    Layer {
        name: name.into(),
        spec: LayerSpec {
            kind,
            in_channels: cin,
            out_channels: cout,
        },
        params: LayerParams::Conv {
            weight: Tensor4D::from_vec([cout, cin, k, k], data).unwrap(),
            bias: (0..cout).map(|_| scale * (rng.gen::<f64>() - 0.5)).collect(),
        },
        inputs,
    }
}

fn bn_layer(name: &str, channels: usize, inputs: Vec<NodeInput>) -> Layer {
    Layer {
        name: name.into(),
        spec: LayerSpec {
            kind: LayerKind::BatchNorm,
            in_channels: channels,
            out_channels: channels,
        },
        params: LayerParams::BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        },
        inputs,
    }
}

fn stateless(name: &str, kind: LayerKind, channels: usize, inputs: Vec<NodeInput>) -> Layer {
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

/// Toy architecture with a skip concat: conv3x3 -> bn -> relu, then a conv
/// over [relu, image], then a 1x1 head. Spatial size preserved (use 4x4).
pub fn toy_member(seed: u64) -> ModelWeights {
    let mut r = rng(seed);
    ModelWeights::new(vec![
        conv_layer(&mut r, "c1", LayerKind::Conv3x3, 1, 2, vec![NodeInput::Image], 0.8),
        bn_layer("bn1", 2, vec![NodeInput::Node(0)]),
        stateless("relu1", LayerKind::Relu, 2, vec![NodeInput::Node(1)]),
        conv_layer(
            &mut r,
            "c2",
            LayerKind::Conv3x3,
            3,
            2,
            vec![NodeInput::Node(2), NodeInput::Image],
            0.8,
        ),
        conv_layer(&mut r, "head", LayerKind::Conv1x1, 2, 2, vec![NodeInput::Node(3)], 0.8),
    ])
    .unwrap()
}

/// Toy architecture exercising pooling and upsampling in the routed path.
pub fn toy_member_pooled(seed: u64) -> ModelWeights {
    let mut r = rng(seed);
    ModelWeights::new(vec![
        conv_layer(&mut r, "c1", LayerKind::Conv3x3, 1, 2, vec![NodeInput::Image], 0.8),
        bn_layer("bn1", 2, vec![NodeInput::Node(0)]),
        stateless("relu1", LayerKind::Relu, 2, vec![NodeInput::Node(1)]),
        stateless("pool", LayerKind::MaxPool2, 2, vec![NodeInput::Node(2)]),
        stateless("up", LayerKind::Upsample2Nearest, 2, vec![NodeInput::Node(3)]),
        conv_layer(&mut r, "head", LayerKind::Conv1x1, 2, 2, vec![NodeInput::Node(4)], 0.8),
    ])
    .unwrap()
}
