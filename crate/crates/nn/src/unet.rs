//! Builder for the desk-scale two-level U-Net.
//!
//! Encoder widths `w, 2w, 4w`, two max-pool downsamples, nearest-neighbor
//! upsampling followed by a conv (no transposed convolutions), skip
//! connections by channel concatenation, and a final 1x1 conv to class
//! logits. He-style fan-in init, fully determined by the seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NnError, Result};
use crate::layer::{Layer, LayerKind, LayerParams, LayerSpec, NodeInput};
use crate::model::ModelWeights;
use crate::rng::derive_rng;
use crate::tensor::Tensor4D;

struct Builder {
    layers: Vec<Layer>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn last(&self) -> NodeInput {
        NodeInput::Node(self.layers.len() - 1)
    }

    fn conv(&mut self, name: &str, kind: LayerKind, cin: usize, cout: usize, inputs: Vec<NodeInput>) {
        let k = if kind == LayerKind::Conv3x3 { 3 } else { 1 };
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data: Vec<f64> = (0..cout * cin * k * k)
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        self.layers.push(Layer {
            name: name.to_string(),
            spec: LayerSpec {
                kind,
                in_channels: cin,
                out_channels: cout,
            },
            params: LayerParams::Conv {
                weight: Tensor4D::from_vec([cout, cin, k, k], data).expect("sized above"),
                bias: vec![0.0; cout],
            },
            inputs,
        });
    }

    fn bn_relu(&mut self, name: &str, channels: usize) {
        let prev = self.last();
        self.layers.push(Layer {
            name: format!("{name}_bn"),
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
            inputs: vec![prev],
        });
        let prev = self.last();
        self.layers.push(Layer {
            name: format!("{name}_relu"),
            spec: LayerSpec {
                kind: LayerKind::Relu,
                in_channels: channels,
                out_channels: channels,
            },
            params: LayerParams::None,
            inputs: vec![prev],
        });
    }

    fn stateless(&mut self, name: &str, kind: LayerKind, channels: usize) {
        let prev = self.last();
        self.layers.push(Layer {
            name: name.to_string(),
            spec: LayerSpec {
                kind,
                in_channels: channels,
                out_channels: channels,
            },
            params: LayerParams::None,
            inputs: vec![prev],
        });
    }

    fn conv_block(&mut self, name: &str, cin: usize, cout: usize, inputs: Vec<NodeInput>) -> NodeInput {
        self.conv(name, LayerKind::Conv3x3, cin, cout, inputs);
        self.bn_relu(name, cout);
        self.last()
    }
}

/// Builds the two-level U-Net. `base_width` is the encoder width at full
/// resolution; channel progression is `w -> 2w -> 4w`.
pub fn build_tiny_unet(in_ch: usize, classes: usize, base_width: usize, seed: u64) -> Result<ModelWeights> {
    if base_width < 4 {
        return Err(NnError::InvalidArgument(format!(
            "base_width must be >= 4, got {base_width}"
        )));
    }
    if in_ch == 0 || classes < 2 {
        return Err(NnError::InvalidArgument(
            "need at least one input channel and two classes".into(),
        ));
    }
    let w = base_width;
    let mut b = Builder {
        layers: Vec::new(),
        rng: derive_rng(seed, "init", &[in_ch as u64, classes as u64, w as u64]),
    };

    b.conv_block("enc1a", in_ch, w, vec![NodeInput::Image]);
    let e1 = b.conv_block("enc1b", w, w, vec![b.last()]);
    b.stateless("pool1", LayerKind::MaxPool2, w);
    b.conv_block("enc2a", w, 2 * w, vec![b.last()]);
    let e2 = b.conv_block("enc2b", 2 * w, 2 * w, vec![b.last()]);
    b.stateless("pool2", LayerKind::MaxPool2, 2 * w);
    b.conv_block("bot_a", 2 * w, 4 * w, vec![b.last()]);
    b.conv_block("bot_b", 4 * w, 4 * w, vec![b.last()]);

    b.stateless("up2", LayerKind::Upsample2Nearest, 4 * w);
    let up2 = b.conv_block("up2c", 4 * w, 2 * w, vec![b.last()]);
    b.conv_block("dec2", 4 * w, 2 * w, vec![up2, e2]);
    b.stateless("up1", LayerKind::Upsample2Nearest, 2 * w);
    let up1 = b.conv_block("up1c", 2 * w, w, vec![b.last()]);
    b.conv_block("dec1", 2 * w, w, vec![up1, e1]);
    b.conv("head", LayerKind::Conv1x1, w, classes, vec![b.last()]);

    ModelWeights::new(b.layers)
}

/// Closed-form parameter count of [`build_tiny_unet`] output (all stored
/// tensors, BN stats included).
pub fn tiny_unet_param_count(in_ch: usize, classes: usize, base_width: usize) -> usize {
    let w = base_width;
    let conv3 = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let conv1 = |cin: usize, cout: usize| cin * cout + cout;
    let bn = |c: usize| 4 * c;
    conv3(in_ch, w) + bn(w)
        + conv3(w, w) + bn(w)
        + conv3(w, 2 * w) + bn(2 * w)
        + conv3(2 * w, 2 * w) + bn(2 * w)
        + conv3(2 * w, 4 * w) + bn(4 * w)
        + conv3(4 * w, 4 * w) + bn(4 * w)
        + conv3(4 * w, 2 * w) + bn(2 * w)
        + conv3(4 * w, 2 * w) + bn(2 * w)
        + conv3(2 * w, w) + bn(w)
        + conv3(2 * w, w) + bn(w)
        + conv1(w, classes)
}

/// Redraws conv weights uniformly in `[-scale, scale]`, for tests that need
/// several distinct-but-congruent models.
pub fn randomize_conv_weights(model: &mut ModelWeights, seed: u64, scale: f64) {
    let mut rng = derive_rng(seed, "init", &[0xda7a]);
    for layer in model.layers_mut() {
        if let LayerParams::Conv { weight, bias } = &mut layer.params {
            for v in weight.data_mut() {
                *v = scale * (rng.gen::<f64>() * 2.0 - 1.0);
            }
            for v in bias.iter_mut() {
                *v = scale * (rng.gen::<f64>() * 2.0 - 1.0);
            }
        }
    }
}
