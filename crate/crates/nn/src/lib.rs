//! Minimal differentiable network engine for 2-D segmentation.
//!
//! Provides the tensor type, the fixed layer set (conv, batch norm, ReLU,
//! pooling, upsampling, channel softmax), forward/backward over a small
//! layer graph, SGD/Adam update rules, a seeded two-level U-Net builder,
//! and a bitwise-lossless checkpoint format. Everything runs on CPU in
//! double precision.

pub mod checkpoint;
pub mod error;
pub mod grad;
pub mod layer;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod unet;

pub use error::{NnError, Result};
pub use grad::{GradientSet, LayerGrad};
pub use layer::{Layer, LayerKind, LayerParams, LayerSpec, Mode, NodeInput};
pub use model::{average_models, mix_conv_layers, ModelWeights, Tape};
pub use optim::{update_rule, Adam, Sgd, UpdateRule, UPDATE_RULE_NAMES};
pub use tensor::Tensor4D;
pub use unet::{build_tiny_unet, randomize_conv_weights, tiny_unet_param_count};
