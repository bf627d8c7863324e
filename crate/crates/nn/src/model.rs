//! Model container and the forward/backward passes over its layer graph.
//!
//! A model is an ordered list of named layers; each layer names its inputs
//! (the image or earlier layers), and multiple inputs are concatenated along
//! channels, which is how U-Net skip connections are wired. The last layer is
//! the output.

use crate::error::{NnError, Result};
use crate::grad::{apply_scaled_to_model, GradientSet, LayerGrad};
use crate::layer::{
    batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, conv_backward_input,
    conv_backward_params, conv_forward, maxpool2_backward, maxpool2_forward, relu_backward,
    relu_forward, softmax_channel_backward, softmax_channel_forward, upsample2_backward,
    upsample2_forward, Layer, LayerKind, LayerParams, Mode, NodeInput,
};
use crate::tensor::Tensor4D;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    architecture_id: String,
    layers: Vec<Layer>,
}

impl ModelWeights {
    /// Builds a model from layers, validating wiring and parameter shapes.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::InvalidArgument("model with no layers".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.inputs.is_empty() {
                return Err(NnError::InvalidArgument(format!(
                    "layer `{}` has no inputs",
                    layer.name
                )));
            }
            for input in &layer.inputs {
                if let NodeInput::Node(j) = input {
                    if *j >= i {
                        return Err(NnError::InvalidArgument(format!(
                            "layer `{}` reads from node {} which is not earlier in the graph",
                            layer.name, j
                        )));
                    }
                }
            }
            if layers.iter().filter(|l| l.name == layer.name).count() > 1 {
                return Err(NnError::InvalidArgument(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
            validate_params(layer)?;
        }
        let architecture_id = compute_architecture_id(&layers);
        Ok(ModelWeights {
            architecture_id,
            layers,
        })
    }

    pub fn architecture_id(&self) -> &str {
        &self.architecture_id
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable layer access. Callers must not change names, kinds, shapes,
    /// or wiring — those are baked into `architecture_id`.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Indices of the conv layers — the linear-combinable set.
    pub fn conv_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.kind.is_conv())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// FNV hash over the bit patterns of every stored parameter.
    pub fn weights_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for l in &self.layers {
            match &l.params {
                LayerParams::Conv { weight, bias } => {
                    weight.data().iter().for_each(|&v| feed(v));
                    bias.iter().for_each(|&v| feed(v));
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    gamma.iter().for_each(|&v| feed(v));
                    beta.iter().for_each(|&v| feed(v));
                    running_mean.iter().for_each(|&v| feed(v));
                    running_var.iter().for_each(|&v| feed(v));
                }
                LayerParams::None => {}
            }
        }
        h
    }

    pub fn check_same_arch(&self, other: &ModelWeights) -> Result<()> {
        if self.architecture_id != other.architecture_id {
            return Err(NnError::ArchMismatch(
                self.architecture_id.clone(),
                other.architecture_id.clone(),
            ));
        }
        Ok(())
    }

    /// `params -= step * grads` over trainable parameters.
    pub fn apply_scaled_gradients(&mut self, grads: &GradientSet, step: f64) -> Result<()> {
        apply_scaled_to_model(self, grads, step)
    }

    /// Scales trainable parameters in place (BN running stats untouched).
    pub fn scale_trainable(&mut self, alpha: f64) {
        for l in &mut self.layers {
            match &mut l.params {
                LayerParams::Conv { weight, bias } => {
                    weight.data_mut().iter_mut().for_each(|v| *v *= alpha);
                    bias.iter_mut().for_each(|v| *v *= alpha);
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    gamma.iter_mut().for_each(|v| *v *= alpha);
                    beta.iter_mut().for_each(|v| *v *= alpha);
                }
                LayerParams::None => {}
            }
        }
    }

    /// Trainable params become `(1 - tau) * self + tau * other`.
    pub fn blend_trainable(&mut self, other: &ModelWeights, tau: f64) -> Result<()> {
        self.check_same_arch(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (&mut a.params, &b.params) {
                (
                    LayerParams::Conv { weight: wa, bias: ba },
                    LayerParams::Conv { weight: wb, bias: bb },
                ) => {
                    for (x, y) in wa.data_mut().iter_mut().zip(wb.data()) {
                        *x = (1.0 - tau) * *x + tau * y;
                    }
                    for (x, y) in ba.iter_mut().zip(bb) {
                        *x = (1.0 - tau) * *x + tau * y;
                    }
                }
                (
                    LayerParams::BatchNorm { gamma: ga, beta: bta, .. },
                    LayerParams::BatchNorm { gamma: gb, beta: btb, .. },
                ) => {
                    for (x, y) in ga.iter_mut().zip(gb) {
                        *x = (1.0 - tau) * *x + tau * y;
                    }
                    for (x, y) in bta.iter_mut().zip(btb) {
                        *x = (1.0 - tau) * *x + tau * y;
                    }
                }
                (LayerParams::None, LayerParams::None) => {}
                _ => unreachable!("same architecture_id implies same layer kinds"),
            }
        }
        Ok(())
    }

    /// Copies BN running stats from a congruent model.
    pub fn copy_bn_stats_from(&mut self, other: &ModelWeights) -> Result<()> {
        self.check_same_arch(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (
                LayerParams::BatchNorm {
                    running_mean: rma,
                    running_var: rva,
                    ..
                },
                LayerParams::BatchNorm {
                    running_mean: rmb,
                    running_var: rvb,
                    ..
                },
            ) = (&mut a.params, &b.params)
            {
                rma.copy_from_slice(rmb);
                rva.copy_from_slice(rvb);
            }
        }
        Ok(())
    }

    /// Sets BN running stats to the elementwise mean over `models`.
    pub fn set_bn_stats_to_mean(&mut self, models: &[&ModelWeights]) -> Result<()> {
        if models.is_empty() {
            return Err(NnError::InvalidArgument("mean over zero models".into()));
        }
        for m in models {
            self.check_same_arch(m)?;
        }
        let k = models.len() as f64;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let LayerParams::BatchNorm {
                running_mean,
                running_var,
                ..
            } = &mut layer.params
            {
                for (j, (rm, rv)) in running_mean.iter_mut().zip(running_var.iter_mut()).enumerate()
                {
                    let mut sm = 0.0;
                    let mut sv = 0.0;
                    for m in models {
                        if let LayerParams::BatchNorm {
                            running_mean: orm,
                            running_var: orv,
                            ..
                        } = &m.layers[i].params
                        {
                            sm += orm[j];
                            sv += orv[j];
                        }
                    }
                    *rm = sm / k;
                    *rv = sv / k;
                }
            }
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &Tensor4D) -> Result<(Tensor4D, Tape)> {
        let mut outputs: Vec<Tensor4D> = Vec::with_capacity(self.layers.len());
        let mut nodes: Vec<NodeTape> = Vec::with_capacity(self.layers.len());
        let mut widths: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let (input, parts) = gather_input(&self.layers[i].inputs, &outputs, x, &self.layers)?;
            widths.push(parts);
            let layer = &mut self.layers[i];
            let (out, tape) = apply_layer_train(layer, &input)?;
            outputs.push(out);
            nodes.push(tape);
        }
        let out = outputs.pop().expect("non-empty model");
        let tape = Tape {
            architecture_id: self.architecture_id.clone(),
            weights_checksum: self.weights_checksum(),
            mode: Mode::Train,
            input_shape: x.shape(),
            output_shape: out.shape(),
            nodes,
            input_widths: widths,
        };
        Ok((out, tape))
    }

    pub fn forward_eval(&self, x: &Tensor4D) -> Result<(Tensor4D, Tape)> {
        let mut outputs: Vec<Tensor4D> = Vec::with_capacity(self.layers.len());
        let mut nodes: Vec<NodeTape> = Vec::with_capacity(self.layers.len());
        let mut widths: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (input, parts) = gather_input(&layer.inputs, &outputs, x, &self.layers)?;
            widths.push(parts);
            let (out, tape) = apply_layer_eval(layer, &input)?;
            outputs.push(out);
            nodes.push(tape);
        }
        let out = outputs.pop().expect("non-empty model");
        let tape = Tape {
            architecture_id: self.architecture_id.clone(),
            weights_checksum: self.weights_checksum(),
            mode: Mode::Eval,
            input_shape: x.shape(),
            output_shape: out.shape(),
            nodes,
            input_widths: widths,
        };
        Ok((out, tape))
    }

    /// Backpropagates `loss_grad` (dL/d logits) through a tape from a
    /// matching forward call; returns gradients for trainable parameters.
    pub fn backward(&self, tape: &Tape, loss_grad: &Tensor4D) -> Result<GradientSet> {
        Ok(self.backward_full(tape, loss_grad)?.0)
    }

    /// Like [`backward`](Self::backward) but also returns dL/d input.
    pub fn backward_full(
        &self,
        tape: &Tape,
        loss_grad: &Tensor4D,
    ) -> Result<(GradientSet, Tensor4D)> {
        if tape.architecture_id != self.architecture_id
            || tape.weights_checksum != self.weights_checksum()
        {
            return Err(NnError::StaleTape(self.architecture_id.clone()));
        }
        if loss_grad.shape() != tape.output_shape {
            return Err(NnError::ShapeMismatch {
                layer: "output".into(),
                expected: format!("{:?}", tape.output_shape),
                got: format!("{:?}", loss_grad.shape()),
            });
        }
        let n = self.layers.len();
        let mut grads = GradientSet::zeros_like(self);
        let mut node_grads: Vec<Option<Tensor4D>> = vec![None; n];
        let mut input_grad = Tensor4D::zeros(tape.input_shape);
        node_grads[n - 1] = Some(loss_grad.clone());
        for i in (0..n).rev() {
            let g = match node_grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let layer = &self.layers[i];
            let (gx, layer_grad) = backward_layer(layer, &tape.nodes[i], &g, tape.mode)?;
            if let Some(lg) = layer_grad {
                grads.layers[i] = lg;
            }
            // split the input gradient back across concatenated sources
            let parts = gx.split_channels(&tape.input_widths[i]);
            for (part, src) in parts.into_iter().zip(&layer.inputs) {
                match src {
                    NodeInput::Image => {
                        for (a, b) in input_grad.data_mut().iter_mut().zip(part.data()) {
                            *a += b;
                        }
                    }
                    NodeInput::Node(j) => match &mut node_grads[*j] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(part),
                    },
                }
            }
        }
        Ok((grads, input_grad))
    }
}

/// Per-node activations recorded during forward, enough to run backward.
#[derive(Debug, Clone)]
pub enum NodeTape {
    Conv { x: Tensor4D },
    BatchNorm { xhat: Tensor4D, inv_std: Vec<f64> },
    Relu { y: Tensor4D },
    MaxPool { argmax: Vec<usize>, in_shape: [usize; 4] },
    Upsample,
    Softmax { y: Tensor4D },
}

#[derive(Debug, Clone)]
pub struct Tape {
    architecture_id: String,
    weights_checksum: u64,
    mode: Mode,
    input_shape: [usize; 4],
    output_shape: [usize; 4],
    nodes: Vec<NodeTape>,
    input_widths: Vec<Vec<usize>>,
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

fn gather_input(
    inputs: &[NodeInput],
    outputs: &[Tensor4D],
    x: &Tensor4D,
    layers: &[Layer],
) -> Result<(Tensor4D, Vec<usize>)> {
    let _ = layers;
    let mut parts: Vec<&Tensor4D> = Vec::with_capacity(inputs.len());
    for input in inputs {
        match input {
            NodeInput::Image => parts.push(x),
            NodeInput::Node(j) => parts.push(&outputs[*j]),
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.channels()).collect();
    if parts.len() == 1 {
        Ok((parts[0].clone(), widths))
    } else {
        Ok((Tensor4D::concat_channels(&parts)?, widths))
    }
}

fn shape_err(layer: &Layer, expected: String, got: [usize; 4]) -> NnError {
    NnError::ShapeMismatch {
        layer: layer.name.clone(),
        expected,
        got: format!("{:?}", got),
    }
}

fn check_in_channels(layer: &Layer, input: &Tensor4D) -> Result<()> {
    if input.channels() != layer.spec.in_channels {
        return Err(shape_err(
            layer,
            format!("{} input channels", layer.spec.in_channels),
            input.shape(),
        ));
    }
    Ok(())
}

fn apply_layer_train(layer: &mut Layer, input: &Tensor4D) -> Result<(Tensor4D, NodeTape)> {
    check_in_channels(layer, input)?;
    match (&layer.spec.kind, &mut layer.params) {
        (LayerKind::Conv3x3 | LayerKind::Conv1x1, LayerParams::Conv { weight, bias }) => {
            let y = conv_forward(weight, bias, input);
            Ok((y, NodeTape::Conv { x: input.clone() }))
        }
        (LayerKind::BatchNorm, LayerParams::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        }) => {
            let bn = batchnorm_forward_train(gamma, beta, running_mean, running_var, input);
            Ok((
                bn.y,
                NodeTape::BatchNorm {
                    xhat: bn.xhat,
                    inv_std: bn.inv_std,
                },
            ))
        }
        (kind, _) => apply_stateless(*kind, layer, input),
    }
}

fn apply_layer_eval(layer: &Layer, input: &Tensor4D) -> Result<(Tensor4D, NodeTape)> {
    check_in_channels(layer, input)?;
    match (&layer.spec.kind, &layer.params) {
        (LayerKind::Conv3x3 | LayerKind::Conv1x1, LayerParams::Conv { weight, bias }) => {
            let y = conv_forward(weight, bias, input);
            Ok((y, NodeTape::Conv { x: input.clone() }))
        }
        (LayerKind::BatchNorm, LayerParams::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        }) => {
            let bn = batchnorm_forward_eval(gamma, beta, running_mean, running_var, input);
            Ok((
                bn.y,
                NodeTape::BatchNorm {
                    xhat: bn.xhat,
                    inv_std: bn.inv_std,
                },
            ))
        }
        (kind, _) => apply_stateless(*kind, layer, input),
    }
}

fn apply_stateless(kind: LayerKind, layer: &Layer, input: &Tensor4D) -> Result<(Tensor4D, NodeTape)> {
    match kind {
        LayerKind::Relu => {
            let y = relu_forward(input);
            Ok((y.clone(), NodeTape::Relu { y }))
        }
        LayerKind::MaxPool2 => {
            let (y, argmax) = maxpool2_forward(input).map_err(|_| {
                shape_err(layer, "even spatial dims".into(), input.shape())
            })?;
            Ok((
                y,
                NodeTape::MaxPool {
                    argmax,
                    in_shape: input.shape(),
                },
            ))
        }
        LayerKind::Upsample2Nearest => Ok((upsample2_forward(input), NodeTape::Upsample)),
        LayerKind::SoftmaxChannel => {
            let y = softmax_channel_forward(input);
            Ok((y.clone(), NodeTape::Softmax { y }))
        }
        _ => unreachable!("parameterized kinds handled by caller"),
    }
}

fn backward_layer(
    layer: &Layer,
    node: &NodeTape,
    grad_out: &Tensor4D,
    mode: Mode,
) -> Result<(Tensor4D, Option<LayerGrad>)> {
    match (&layer.params, node) {
        (LayerParams::Conv { weight, .. }, NodeTape::Conv { x }) => {
            let gx = conv_backward_input(weight, grad_out, layer.spec.in_channels);
            let (gw, gb) = conv_backward_params(x, grad_out, layer.spec.kernel_size());
            Ok((gx, Some(LayerGrad::Conv { weight: gw, bias: gb })))
        }
        (LayerParams::BatchNorm { gamma, .. }, NodeTape::BatchNorm { xhat, inv_std }) => {
            let out = batchnorm_backward(gamma, xhat, inv_std, grad_out, mode == Mode::Train);
            Ok((
                out.gx,
                Some(LayerGrad::BatchNorm {
                    gamma: out.dgamma,
                    beta: out.dbeta,
                }),
            ))
        }
        (LayerParams::None, NodeTape::Relu { y }) => Ok((relu_backward(y, grad_out), None)),
        (LayerParams::None, NodeTape::MaxPool { argmax, in_shape }) => {
            Ok((maxpool2_backward(argmax, grad_out, *in_shape), None))
        }
        (LayerParams::None, NodeTape::Upsample) => Ok((upsample2_backward(grad_out), None)),
        (LayerParams::None, NodeTape::Softmax { y }) => {
            Ok((softmax_channel_backward(y, grad_out), None))
        }
        _ => Err(NnError::StaleTape(layer.name.clone())),
    }
}

fn validate_params(layer: &Layer) -> Result<()> {
    let spec = &layer.spec;
    match (&spec.kind, &layer.params) {
        (LayerKind::Conv3x3 | LayerKind::Conv1x1, LayerParams::Conv { weight, bias }) => {
            let k = spec.kernel_size();
            let expect = [spec.out_channels, spec.in_channels, k, k];
            if weight.shape() != expect {
                return Err(NnError::ShapeMismatch {
                    layer: layer.name.clone(),
                    expected: format!("{:?}", expect),
                    got: format!("{:?}", weight.shape()),
                });
            }
            if bias.len() != spec.out_channels {
                return Err(NnError::ShapeMismatch {
                    layer: layer.name.clone(),
                    expected: format!("bias[{}]", spec.out_channels),
                    got: format!("bias[{}]", bias.len()),
                });
            }
        }
        (LayerKind::BatchNorm, LayerParams::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        }) => {
            if spec.in_channels != spec.out_channels {
                return Err(NnError::InvalidArgument(format!(
                    "batchnorm `{}` must preserve channels",
                    layer.name
                )));
            }
            let c = spec.out_channels;
            if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c
            {
                return Err(NnError::ShapeMismatch {
                    layer: layer.name.clone(),
                    expected: format!("4 vectors of length {}", c),
                    got: format!(
                        "({}, {}, {}, {})",
                        gamma.len(),
                        beta.len(),
                        running_mean.len(),
                        running_var.len()
                    ),
                });
            }
            if running_var.iter().any(|v| *v <= 0.0) {
                return Err(NnError::InvalidArgument(format!(
                    "batchnorm `{}` running_var must be positive",
                    layer.name
                )));
            }
        }
        (
            LayerKind::Relu | LayerKind::MaxPool2 | LayerKind::Upsample2Nearest
            | LayerKind::SoftmaxChannel,
            LayerParams::None,
        ) => {
            if spec.in_channels != spec.out_channels {
                return Err(NnError::InvalidArgument(format!(
                    "layer `{}` must preserve channels",
                    layer.name
                )));
            }
        }
        _ => {
            return Err(NnError::InvalidArgument(format!(
                "layer `{}`: params do not match kind {}",
                layer.name,
                spec.kind.as_str()
            )))
        }
    }
    Ok(())
}

fn compute_architecture_id(layers: &[Layer]) -> String {
    let mut parts = Vec::with_capacity(layers.len());
    for layer in layers {
        let inputs: Vec<String> = layer
            .inputs
            .iter()
            .map(|i| match i {
                NodeInput::Image => "img".to_string(),
                NodeInput::Node(j) => j.to_string(),
            })
            .collect();
        parts.push(format!(
            "{}:{}:{}>{}@{}",
            layer.name,
            layer.spec.kind.as_str(),
            layer.spec.in_channels,
            layer.spec.out_channels,
            inputs.join("+")
        ));
    }
    parts.join("|")
}

/// Parameter-wise mean of congruent models (all stored tensors, BN stats
/// included).
pub fn average_models(models: &[&ModelWeights]) -> Result<ModelWeights> {
    let first = models
        .first()
        .ok_or_else(|| NnError::InvalidArgument("average of zero models".into()))?;
    let mut out = (*first).clone();
    let k = models.len() as f64;
    for (i, layer) in out.layers.iter_mut().enumerate() {
        match &mut layer.params {
            LayerParams::Conv { weight, bias } => {
                average_into(weight.data_mut(), models, |m| match &m.layers[i].params {
                    LayerParams::Conv { weight, .. } => weight.data(),
                    _ => unreachable!(),
                }, k)?;
                average_into(bias, models, |m| match &m.layers[i].params {
                    LayerParams::Conv { bias, .. } => bias,
                    _ => unreachable!(),
                }, k)?;
            }
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                average_into(gamma, models, |m| match &m.layers[i].params {
                    LayerParams::BatchNorm { gamma, .. } => gamma,
                    _ => unreachable!(),
                }, k)?;
                average_into(beta, models, |m| match &m.layers[i].params {
                    LayerParams::BatchNorm { beta, .. } => beta,
                    _ => unreachable!(),
                }, k)?;
                average_into(running_mean, models, |m| match &m.layers[i].params {
                    LayerParams::BatchNorm { running_mean, .. } => running_mean,
                    _ => unreachable!(),
                }, k)?;
                average_into(running_var, models, |m| match &m.layers[i].params {
                    LayerParams::BatchNorm { running_var, .. } => running_var,
                    _ => unreachable!(),
                }, k)?;
            }
            LayerParams::None => {}
        }
    }
    for m in models.iter().skip(1) {
        out.check_same_arch(m)?;
    }
    Ok(out)
}

fn average_into<'a>(
    dst: &mut [f64],
    models: &[&'a ModelWeights],
    pick: impl Fn(&'a ModelWeights) -> &'a [f64],
    k: f64,
) -> Result<()> {
    for v in dst.iter_mut() {
        *v = 0.0;
    }
    for m in models {
        let src = pick(m);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
    for v in dst.iter_mut() {
        *v /= k;
    }
    Ok(())
}

/// Builds a model whose conv layers are `sum_i coeffs[i] * members[i]` while
/// every non-conv parameter (BN affine and stats) comes from `base`.
pub fn mix_conv_layers(
    base: &ModelWeights,
    members: &[&ModelWeights],
    coeffs: &[f64],
) -> Result<ModelWeights> {
    if members.len() != coeffs.len() {
        return Err(NnError::InvalidArgument(
            "one coefficient per member required".into(),
        ));
    }
    let mut out = base.clone();
    for m in members {
        base.check_same_arch(m)?;
    }
    for (i, layer) in out.layers.iter_mut().enumerate() {
        if let LayerParams::Conv { weight, bias } = &mut layer.params {
            weight.data_mut().fill(0.0);
            bias.fill(0.0);
            for (m, &c) in members.iter().zip(coeffs) {
                if let LayerParams::Conv { weight: mw, bias: mb } = &m.layers[i].params {
                    for (d, s) in weight.data_mut().iter_mut().zip(mw.data()) {
                        *d += c * s;
                    }
                    for (d, s) in bias.iter_mut().zip(mb) {
                        *d += c * s;
                    }
                }
            }
        }
    }
    Ok(out)
}
