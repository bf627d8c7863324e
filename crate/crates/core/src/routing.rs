//! Test-time model routing for clients outside the federation.
//!
//! A routing space holds K personalized models plus the global model,
//! frozen. At every conv layer a small coefficient network per member maps
//! the pooled layer input to a sigmoid re-weight coefficient; the layer
//! output is the coefficient-weighted sum of each member's conv output
//! (exact weight mixing, by linearity of convolution). BN layers normalize
//! with statistics computed from the test batch itself, using the global
//! model's affine parameters. Only coefficient-network parameters train,
//! driven by an unsupervised loss.

use rayon::prelude::*;

use rand_distr::{Distribution, Normal};

use fedroute_nn::layer::{
    batchnorm_backward, batchnorm_forward_stats, conv_backward_input, conv_forward,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, softmax_channel_backward,
    softmax_channel_forward, upsample2_backward, upsample2_forward, LayerKind, LayerParams,
    NodeInput,
};
use fedroute_nn::rng::derive_rng;
use fedroute_nn::{ModelWeights, Tensor4D};

use crate::error::{Result, SimError};
use crate::metrics::argmax_mask;
use crate::ttloss::{consistency_loss_grad, entropy_loss_grad, shape_loss_grad};

const TRAIN_NOISE_STREAM: u64 = 0;
const EVAL_NOISE_STREAM: u64 = 1;

/// K personalized models plus the global model (last), immutable during
/// adaptation.
#[derive(Debug, Clone)]
pub struct RoutingSpace {
    members: Vec<ModelWeights>,
    routable: Vec<usize>,
}

impl RoutingSpace {
    /// `members` must share one architecture; the global model goes last.
    pub fn new(personalized: Vec<ModelWeights>, global: ModelWeights) -> Result<Self> {
        let mut members = personalized;
        members.push(global);
        if members.len() < 2 {
            return Err(SimError::InvalidInput(
                "routing space needs at least two members".into(),
            ));
        }
        for m in &members[1..] {
            members[0].check_same_arch(m).map_err(SimError::Engine)?;
        }
        let routable = members[0].conv_layer_indices();
        Ok(RoutingSpace { members, routable })
    }

    pub fn members(&self) -> &[ModelWeights] {
        &self.members
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    /// Conv layer indices, in graph order — the routable set.
    pub fn routable_layers(&self) -> &[usize] {
        &self.routable
    }

    pub fn global(&self) -> &ModelWeights {
        self.members.last().expect("at least two members")
    }

    pub fn checksum(&self) -> u64 {
        self.members
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |acc, m| {
                acc.rotate_left(7) ^ m.weights_checksum()
            })
    }
}

/// Two-stage head: pooled input (cin) -> hidden -> scalar, tanh between
/// stages, sigmoid on the output. The sigmoid carries a structural offset
/// `ln(1/K)` (K = member count - 1), evaluated as
/// `r = 1 / (1 + K * exp(-pre))`, so that the zero-initialized head yields
/// exactly `1/(K+1)` in floating point for every K.
#[derive(Debug, Clone)]
pub struct CoefHead {
    pub w1: Vec<f64>, // hidden x cin, row-major
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    /// Structural constant `K = members - 1`; not a trainable parameter.
    pub k_factor: f64,
    pub cin: usize,
    pub hidden: usize,
}

impl CoefHead {
    fn n_params(&self) -> usize {
        self.hidden * self.cin + 2 * self.hidden + 1
    }

    /// Returns `(r, hidden activations)` for one pooled vector.
    fn eval(&self, pooled: &[f64]) -> (f64, Vec<f64>) {
        let mut hidden = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            let mut acc = self.b1[j];
            for (c, p) in pooled.iter().enumerate() {
                acc += self.w1[j * self.cin + c] * p;
            }
            hidden[j] = acc.tanh();
        }
        let mut pre = self.b2;
        for (w, h) in self.w2.iter().zip(&hidden) {
            pre += w * h;
        }
        // sigmoid(pre - ln K); dr/dpre is still r * (1 - r)
        let r = 1.0 / (1.0 + self.k_factor * (-pre).exp());
        (r, hidden)
    }
}

/// All coefficient networks: one head per (routable layer, member).
#[derive(Debug, Clone)]
pub struct CoefficientNets {
    /// `heads[layer_pos][member]` where `layer_pos` indexes the routable set.
    pub heads: Vec<Vec<CoefHead>>,
}

impl CoefficientNets {
    /// Initialization per the routing scheme: zero final weights and an
    /// effective final bias of `ln(1/K)` (carried inside the sigmoid), so
    /// every coefficient starts at exactly `1/(K+1)` regardless of input.
    /// First-stage weights are He-initialized from the seed's `init` stream.
    pub fn init(space: &RoutingSpace, seed: u64) -> Self {
        let members = space.member_count();
        let k_factor = (members - 1) as f64;
        let mut rng = derive_rng(seed, "init", &[0x0ef0]);
        let mut heads = Vec::with_capacity(space.routable.len());
        for &li in &space.routable {
            let cin = space.members[0].layers()[li].spec.in_channels;
            let hidden = (cin / 2).max(4);
            let std = (2.0 / cin as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid std");
            let mut layer_heads = Vec::with_capacity(members);
            for _ in 0..members {
                layer_heads.push(CoefHead {
                    w1: (0..hidden * cin).map(|_| dist.sample(&mut rng)).collect(),
                    b1: vec![0.0; hidden],
                    w2: vec![0.0; hidden],
                    b2: 0.0,
                    k_factor,
                    cin,
                    hidden,
                });
            }
            heads.push(layer_heads);
        }
        CoefficientNets { heads }
    }

    pub fn n_params(&self) -> usize {
        self.heads
            .iter()
            .flat_map(|l| l.iter())
            .map(|h| h.n_params())
            .sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.heads {
            for h in layer {
                out.extend_from_slice(&h.w1);
                out.extend_from_slice(&h.b1);
                out.extend_from_slice(&h.w2);
                out.push(h.b2);
            }
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        for layer in &mut self.heads {
            for h in layer {
                let (w1, b1, w2) = (h.w1.len(), h.b1.len(), h.w2.len());
                h.w1.copy_from_slice(&flat[i..i + w1]);
                i += w1;
                h.b1.copy_from_slice(&flat[i..i + b1]);
                i += b1;
                h.w2.copy_from_slice(&flat[i..i + w2]);
                i += w2;
                h.b2 = flat[i];
                i += 1;
            }
        }
        debug_assert_eq!(i, flat.len());
    }

    /// Saturates every head toward member `j`: final weights zero, final
    /// bias `+bias` for member `j` and `-bias` for the rest.
    pub fn saturate_to_member(&mut self, j: usize, bias: f64) {
        for layer in &mut self.heads {
            for (m, h) in layer.iter_mut().enumerate() {
                h.w2.fill(0.0);
                h.b2 = if m == j { bias } else { -bias };
            }
        }
    }
}

/// Batch-mean coefficients, one row per routable layer, one column per
/// member.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMatrix {
    pub layer_indices: Vec<usize>,
    /// `mean[layer_pos][member]`, averaged over the batch.
    pub mean: Vec<Vec<f64>>,
}

enum RtNode {
    Conv {
        member_outs: Vec<Tensor4D>,
        pooled: Vec<Vec<f64>>,
        hidden: Vec<Vec<Vec<f64>>>,
        r: Vec<Vec<f64>>,
        in_hw: usize,
    },
    Bn {
        xhat: Tensor4D,
        inv_std: Vec<f64>,
    },
    Relu {
        y: Tensor4D,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_shape: [usize; 4],
    },
    Upsample,
}

/// Activations recorded by [`routed_forward`], sufficient to push loss
/// gradients back to the coefficient networks.
pub struct RoutedTape {
    nodes: Vec<RtNode>,
    input_widths: Vec<Vec<usize>>,
    probs: Tensor4D,
    space_checksum: u64,
}

pub struct RoutedForward {
    pub probs: Tensor4D,
    pub routing: RoutingMatrix,
    /// Per-sample coefficients `[layer_pos][sample][member]`.
    pub per_sample: Vec<Vec<Vec<f64>>>,
    pub tape: RoutedTape,
}

/// Mixed forward pass over the routing space. Input-conditioned per-sample
/// coefficients; returns per-pixel class probabilities.
pub fn routed_forward(
    space: &RoutingSpace,
    nets: &CoefficientNets,
    x: &Tensor4D,
) -> Result<RoutedForward> {
    let arch = &space.members[0];
    let layers = arch.layers();
    let n = x.batch();
    let mut outputs: Vec<Tensor4D> = Vec::with_capacity(layers.len());
    let mut nodes: Vec<RtNode> = Vec::with_capacity(layers.len());
    let mut widths: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
    let mut routable_pos = 0usize;
    let mut per_sample: Vec<Vec<Vec<f64>>> = Vec::with_capacity(space.routable.len());

    for (li, layer) in layers.iter().enumerate() {
        // gather (and concat) inputs
        let mut parts: Vec<&Tensor4D> = Vec::with_capacity(layer.inputs.len());
        for input in &layer.inputs {
            match input {
                NodeInput::Image => parts.push(x),
                NodeInput::Node(j) => parts.push(&outputs[*j]),
            }
        }
        widths.push(parts.iter().map(|p| p.channels()).collect());
        let input = if parts.len() == 1 {
            parts[0].clone()
        } else {
            Tensor4D::concat_channels(&parts).map_err(SimError::Engine)?
        };
        if input.channels() != layer.spec.in_channels {
            return Err(SimError::Engine(fedroute_nn::NnError::ShapeMismatch {
                layer: layer.name.clone(),
                expected: format!("{} input channels", layer.spec.in_channels),
                got: format!("{:?}", input.shape()),
            }));
        }

        let out = match layer.spec.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let heads = &nets.heads[routable_pos];
                let (hw, cin) = (input.height() * input.width(), input.channels());
                // adaptive average pooling per sample
                let pooled: Vec<Vec<f64>> = (0..n)
                    .map(|b| {
                        (0..cin)
                            .map(|c| input.plane(b, c).iter().sum::<f64>() / hw as f64)
                            .collect()
                    })
                    .collect();
                let mut r = vec![vec![0.0; heads.len()]; n];
                let mut hidden = vec![Vec::with_capacity(heads.len()); n];
                for b in 0..n {
                    for (m, head) in heads.iter().enumerate() {
                        let (rv, hv) = head.eval(&pooled[b]);
                        r[b][m] = rv;
                        hidden[b].push(hv);
                    }
                }
                // per-member convs of the shared input, then weighted sum
                let member_outs: Vec<Tensor4D> = space
                    .members
                    .par_iter()
                    .map(|member| match &member.layers()[li].params {
                        LayerParams::Conv { weight, bias } => conv_forward(weight, bias, &input),
                        _ => unreachable!("routable layers are convs"),
                    })
                    .collect();
                let [_, co, oh, ow] = member_outs[0].shape();
                let mut out = Tensor4D::zeros([n, co, oh, ow]);
                for b in 0..n {
                    for (m, mo) in member_outs.iter().enumerate() {
                        let coeff = r[b][m];
                        for c in 0..co {
                            let start = out.idx(b, c, 0, 0);
                            let plane = mo.plane(b, c);
                            let dst = &mut out.data_mut()[start..start + oh * ow];
                            for (d, s) in dst.iter_mut().zip(plane) {
                                *d += coeff * s;
                            }
                        }
                    }
                }
                per_sample.push(r.clone());
                nodes.push(RtNode::Conv {
                    member_outs,
                    pooled,
                    hidden,
                    r,
                    in_hw: hw,
                });
                routable_pos += 1;
                out
            }
            LayerKind::BatchNorm => {
                // test-batch statistics with the global model's affine params
                let (gamma, beta) = match &space.global().layers()[li].params {
                    LayerParams::BatchNorm { gamma, beta, .. } => (gamma, beta),
                    _ => unreachable!("batchnorm layer"),
                };
                let bn = batchnorm_forward_stats(gamma, beta, &input);
                nodes.push(RtNode::Bn {
                    xhat: bn.xhat,
                    inv_std: bn.inv_std,
                });
                bn.y
            }
            LayerKind::Relu => {
                let y = relu_forward(&input);
                nodes.push(RtNode::Relu { y: y.clone() });
                y
            }
            LayerKind::MaxPool2 => {
                let (y, argmax) = maxpool2_forward(&input).map_err(SimError::Engine)?;
                nodes.push(RtNode::MaxPool {
                    argmax,
                    in_shape: input.shape(),
                });
                y
            }
            LayerKind::Upsample2Nearest => {
                nodes.push(RtNode::Upsample);
                upsample2_forward(&input)
            }
            LayerKind::SoftmaxChannel => {
                return Err(SimError::InvalidInput(
                    "routed architectures end in logits; softmax is applied by the router".into(),
                ))
            }
        };
        outputs.push(out);
    }

    let logits = outputs.pop().expect("non-empty architecture");
    let probs = softmax_channel_forward(&logits);
    let mean = per_sample
        .iter()
        .map(|layer| {
            let members = layer[0].len();
            (0..members)
                .map(|m| layer.iter().map(|row| row[m]).sum::<f64>() / layer.len() as f64)
                .collect()
        })
        .collect();
    Ok(RoutedForward {
        probs: probs.clone(),
        routing: RoutingMatrix {
            layer_indices: space.routable.clone(),
            mean,
        },
        per_sample,
        tape: RoutedTape {
            nodes,
            input_widths: widths,
            probs,
            space_checksum: space.checksum(),
        },
    })
}

/// Backpropagates `d loss / d probs` through a routed tape. Only coefficient
/// parameters receive gradients (flat layout matching
/// [`CoefficientNets::to_flat`]); member weights stay untouched.
pub fn routed_backward(
    space: &RoutingSpace,
    nets: &CoefficientNets,
    tape: &RoutedTape,
    grad_probs: &Tensor4D,
) -> Result<Vec<f64>> {
    if tape.space_checksum != space.checksum() {
        return Err(SimError::InvalidInput(
            "routed tape does not match the routing space".into(),
        ));
    }
    let arch = &space.members[0];
    let layers = arch.layers();
    let count = layers.len();
    let mut theta = vec![0.0; nets.n_params()];
    // per-head offsets into the flat layout
    let mut offsets: Vec<Vec<usize>> = Vec::with_capacity(nets.heads.len());
    {
        let mut off = 0usize;
        for layer in &nets.heads {
            let mut row = Vec::with_capacity(layer.len());
            for h in layer {
                row.push(off);
                off += h.n_params();
            }
            offsets.push(row);
        }
    }

    let mut node_grads: Vec<Option<Tensor4D>> = vec![None; count];
    let logits_grad = softmax_channel_backward(&tape.probs, grad_probs);
    node_grads[count - 1] = Some(logits_grad);

    let mut routable_pos = nets.heads.len();
    for i in (0..count).rev() {
        let layer = &layers[i];
        if layer.spec.kind.is_conv() {
            routable_pos -= 1;
        }
        let g = match node_grads[i].take() {
            Some(g) => g,
            None => continue,
        };
        let gx = match (&layer.spec.kind, &tape.nodes[i]) {
            (
                LayerKind::Conv3x3 | LayerKind::Conv1x1,
                RtNode::Conv {
                    member_outs,
                    pooled,
                    hidden,
                    r,
                    in_hw,
                },
            ) => {
                let n = g.batch();
                let heads = &nets.heads[routable_pos];
                let cin = layer.spec.in_channels;
                let (ih, iw) = spatial_of(in_hw, &g);
                let mut gx = Tensor4D::zeros([n, cin, ih, iw]);
                for b in 0..n {
                    // d loss / d r[b][m] = <G[b], member_out_m[b]>
                    for (m, mo) in member_outs.iter().enumerate() {
                        let mut dr = 0.0;
                        for c in 0..g.channels() {
                            for (gv, ov) in g.plane(b, c).iter().zip(mo.plane(b, c)) {
                                dr += gv * ov;
                            }
                        }
                        // head backward
                        let head = &heads[m];
                        let rv = r[b][m];
                        let dpre = dr * rv * (1.0 - rv);
                        let base = offsets[routable_pos][m];
                        let hids = &hidden[b][m];
                        let (w1_len, b1_len) = (head.w1.len(), head.b1.len());
                        let mut dpooled = vec![0.0; cin];
                        for j in 0..head.hidden {
                            let dh = dpre * head.w2[j];
                            let dhpre = dh * (1.0 - hids[j] * hids[j]);
                            theta[base + w1_len + j] += dhpre; // b1
                            theta[base + w1_len + b1_len + j] += dpre * hids[j]; // w2
                            for c in 0..cin {
                                theta[base + j * cin + c] += dhpre * pooled[b][c]; // w1
                                dpooled[c] += dhpre * head.w1[j * cin + c];
                            }
                        }
                        theta[base + w1_len + 2 * b1_len] += dpre; // b2
                        // pooled path into the layer input
                        for (c, dp) in dpooled.iter().enumerate() {
                            let spread = dp / *in_hw as f64;
                            let start = gx.idx(b, c, 0, 0);
                            for v in gx.data_mut()[start..start + in_hw].iter_mut() {
                                *v += spread;
                            }
                        }
                    }
                    // conv path: mixed kernel for this sample, exact by
                    // bilinearity of the convolution in (kernel, input)
                    let coeffs = &r[b];
                    let mixed = mix_member_kernels(space, i, coeffs)?;
                    let gb = slice_sample(&g, b);
                    let gxb = conv_backward_input(&mixed, &gb, cin);
                    add_sample(&mut gx, b, &gxb);
                }
                gx
            }
            (LayerKind::BatchNorm, RtNode::Bn { xhat, inv_std }) => {
                let gamma = match &space.global().layers()[i].params {
                    LayerParams::BatchNorm { gamma, .. } => gamma,
                    _ => unreachable!(),
                };
                batchnorm_backward(gamma, xhat, inv_std, &g, true).gx
            }
            (LayerKind::Relu, RtNode::Relu { y }) => relu_backward(y, &g),
            (LayerKind::MaxPool2, RtNode::MaxPool { argmax, in_shape }) => {
                maxpool2_backward(argmax, &g, *in_shape)
            }
            (LayerKind::Upsample2Nearest, RtNode::Upsample) => upsample2_backward(&g),
            _ => {
                return Err(SimError::InvalidInput(
                    "routed tape node does not match architecture".into(),
                ))
            }
        };
        let parts = gx.split_channels(&tape.input_widths[i]);
        for (part, src) in parts.into_iter().zip(&layer.inputs) {
            if let NodeInput::Node(j) = src {
                match &mut node_grads[*j] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(part),
                }
            }
        }
    }
    Ok(theta)
}

fn spatial_of(in_hw: &usize, g: &Tensor4D) -> (usize, usize) {
    // conv preserves spatial dims, so the input plane has the same h, w
    let (h, w) = (g.height(), g.width());
    debug_assert_eq!(h * w, *in_hw);
    (h, w)
}

fn mix_member_kernels(space: &RoutingSpace, layer_idx: usize, coeffs: &[f64]) -> Result<Tensor4D> {
    let mut acc: Option<Tensor4D> = None;
    for (member, &c) in space.members.iter().zip(coeffs) {
        if let LayerParams::Conv { weight, .. } = &member.layers()[layer_idx].params {
            match &mut acc {
                Some(w) => {
                    for (d, s) in w.data_mut().iter_mut().zip(weight.data()) {
                        *d += c * s;
                    }
                }
                None => {
                    let mut w = weight.clone();
                    for v in w.data_mut() {
                        *v *= c;
                    }
                    acc = Some(w);
                }
            }
        }
    }
    acc.ok_or_else(|| SimError::InvalidInput("mixing a non-conv layer".into()))
}

fn slice_sample(t: &Tensor4D, b: usize) -> Tensor4D {
    let [_, c, h, w] = t.shape();
    let mut out = Tensor4D::zeros([1, c, h, w]);
    for ch in 0..c {
        out.plane_mut(0, ch).copy_from_slice(t.plane(b, ch));
    }
    out
}

fn add_sample(dst: &mut Tensor4D, b: usize, src: &Tensor4D) {
    for c in 0..dst.channels() {
        let start = dst.idx(b, c, 0, 0);
        let hw = dst.height() * dst.width();
        for (d, s) in dst.data_mut()[start..start + hw].iter_mut().zip(src.plane(0, c)) {
            *d += s;
        }
    }
}

/// `x + eps`, `eps ~ N(0, sigma^2)` i.i.d., from the perturbation stream of
/// `seed`.
pub fn perturb(x: &Tensor4D, sigma: f64, seed: u64) -> Tensor4D {
    let mut out = x.clone();
    if sigma == 0.0 {
        return out;
    }
    let mut rng = derive_rng(seed, "perturbation", &[]);
    let dist = Normal::new(0.0, sigma).expect("valid sigma");
    for v in out.data_mut() {
        *v += dist.sample(&mut rng);
    }
    out
}

/// Knobs of the test-time objective and its optimizer.
#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub beta: f64,
    pub radius: usize,
    pub noise_sigma: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 10,
            lr: 1e-3,
            batch: 4,
            beta: 0.01,
            radius: 2,
            noise_sigma: 0.5,
        }
    }
}

/// One evaluation of the test-time objective on a batch.
pub struct TestTimeEval {
    pub loss: f64,
    pub consistency: f64,
    pub shape: f64,
    pub entropy: f64,
    pub clean: RoutedForward,
    pub noisy: RoutedForward,
}

/// `L_t = L_cons(x, x+eps) + beta * (L_s + L_e)`, shape and entropy taken on
/// the clean prediction.
pub fn test_time_loss(
    space: &RoutingSpace,
    nets: &CoefficientNets,
    x: &Tensor4D,
    noise_seed: u64,
    cfg: &AdaptConfig,
) -> Result<TestTimeEval> {
    let noisy_x = perturb(x, cfg.noise_sigma, noise_seed);
    let clean = routed_forward(space, nets, x)?;
    let noisy = routed_forward(space, nets, &noisy_x)?;
    let (lc, _, _) = consistency_loss_grad(&clean.probs, &noisy.probs);
    let (ls, _) = shape_loss_grad(&clean.probs, cfg.radius);
    let (le, _) = entropy_loss_grad(&clean.probs);
    Ok(TestTimeEval {
        loss: lc + cfg.beta * (ls + le),
        consistency: lc,
        shape: ls,
        entropy: le,
        clean,
        noisy,
    })
}

/// Test-time loss and its gradient w.r.t. the coefficient parameters.
pub fn test_time_loss_grads(
    space: &RoutingSpace,
    nets: &CoefficientNets,
    x: &Tensor4D,
    noise_seed: u64,
    cfg: &AdaptConfig,
) -> Result<(f64, Vec<f64>)> {
    let noisy_x = perturb(x, cfg.noise_sigma, noise_seed);
    let clean = routed_forward(space, nets, x)?;
    let noisy = routed_forward(space, nets, &noisy_x)?;
    let (lc, mut g_clean, g_noisy) = consistency_loss_grad(&clean.probs, &noisy.probs);
    let (ls, gs) = shape_loss_grad(&clean.probs, cfg.radius);
    let (le, ge) = entropy_loss_grad(&clean.probs);
    for ((g, s), e) in g_clean.data_mut().iter_mut().zip(gs.data()).zip(ge.data()) {
        *g += cfg.beta * (s + e);
    }
    let mut theta = routed_backward(space, nets, &clean.tape, &g_clean)?;
    let theta_noisy = routed_backward(space, nets, &noisy.tape, &g_noisy)?;
    for (a, b) in theta.iter_mut().zip(&theta_noisy) {
        *a += b;
    }
    let loss = lc + cfg.beta * (ls + le);
    if !loss.is_finite() {
        return Err(SimError::NonFinite("test-time loss".into()));
    }
    Ok((loss, theta))
}

/// Flat-vector Adam for the coefficient parameters.
struct AdamVec {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamVec {
    fn new(lr: f64, n: usize) -> Self {
        AdamVec {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let mc = 1.0 / (1.0 - self.b1.powi(self.t));
        let vc = 1.0 / (1.0 - self.b2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grads[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grads[i] * grads[i];
            let mhat = self.m[i] * mc;
            let vhat = self.v[i] * vc;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Per-epoch coefficient statistics for the routing report.
#[derive(Debug, Clone)]
pub struct EpochRoutingStats {
    /// `(layer index, member, mean, std)` rows over all test samples.
    pub rows: Vec<(usize, usize, f64, f64)>,
}

/// Result of running test-time adaptation over an unlabeled test set.
pub struct AdaptOutcome {
    /// Chosen epoch (index into the traces; 0 is the untrained init state).
    pub best_epoch: usize,
    /// Mean unsupervised loss over the full test set, one entry per epoch
    /// including epoch 0.
    pub loss_trace: Vec<f64>,
    /// Predicted label maps per epoch (same indexing as `loss_trace`).
    pub epoch_predictions: Vec<Vec<Vec<u8>>>,
    /// Predictions of the best epoch — what the strategy reports.
    pub predictions: Vec<Vec<u8>>,
    /// Coefficient statistics per epoch.
    pub routing_stats: Vec<EpochRoutingStats>,
    /// Coefficient nets of the best epoch.
    pub best_nets: CoefficientNets,
}

/// Optimizes the coefficient networks on unlabeled test images for
/// `cfg.epochs` epochs of Adam, evaluating the mean unsupervised loss over
/// the full test set after every epoch. Predictions come from the epoch with
/// the lowest mean loss. Labels are never seen: the input is images only.
pub fn adapt(
    space: &RoutingSpace,
    images: &[Tensor4D],
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    if images.is_empty() {
        return Err(SimError::InvalidInput("adaptation on an empty test set".into()));
    }
    let mut nets = CoefficientNets::init(space, seed);
    let mut opt = AdamVec::new(cfg.lr, nets.n_params());
    let batches: Vec<Vec<usize>> = (0..images.len())
        .collect::<Vec<_>>()
        .chunks(cfg.batch.max(1))
        .map(|c| c.to_vec())
        .collect();

    let evaluate = |nets: &CoefficientNets| -> Result<(f64, Vec<Vec<u8>>, EpochRoutingStats)> {
        let mut loss_sum = 0.0;
        let mut weight = 0.0;
        let mut preds = Vec::with_capacity(images.len());
        let mut coeff_samples: Vec<Vec<Vec<f64>>> = Vec::new();
        for (ci, batch) in batches.iter().enumerate() {
            let x = pack_images(images, batch);
            let eval_seed = fedroute_nn::rng::derive_seed(
                seed,
                "perturbation",
                &[EVAL_NOISE_STREAM, ci as u64],
            );
            let ev = test_time_loss(space, nets, &x, eval_seed, cfg)?;
            loss_sum += ev.loss * batch.len() as f64;
            weight += batch.len() as f64;
            preds.extend(argmax_mask(&ev.clean.probs));
            // collect per-sample coefficients for the report
            if coeff_samples.is_empty() {
                coeff_samples = vec![Vec::new(); ev.clean.per_sample.len()];
            }
            for (lp, layer) in ev.clean.per_sample.iter().enumerate() {
                coeff_samples[lp].extend(layer.iter().cloned());
            }
        }
        let mut rows = Vec::new();
        for (lp, samples) in coeff_samples.iter().enumerate() {
            let members = samples[0].len();
            for m in 0..members {
                let vals: Vec<f64> = samples.iter().map(|s| s[m]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                rows.push((space.routable[lp], m, mean, var.sqrt()));
            }
        }
        Ok((loss_sum / weight, preds, EpochRoutingStats { rows }))
    };

    let mut loss_trace = Vec::with_capacity(cfg.epochs + 1);
    let mut epoch_predictions = Vec::with_capacity(cfg.epochs + 1);
    let mut routing_stats = Vec::with_capacity(cfg.epochs + 1);
    let mut nets_by_epoch = Vec::with_capacity(cfg.epochs + 1);

    let (l0, p0, s0) = evaluate(&nets)?;
    loss_trace.push(l0);
    epoch_predictions.push(p0);
    routing_stats.push(s0);
    nets_by_epoch.push(nets.clone());

    let mut params = nets.to_flat();
    for epoch in 0..cfg.epochs {
        for (step, batch) in batches.iter().enumerate() {
            let x = pack_images(images, batch);
            let noise_seed = fedroute_nn::rng::derive_seed(
                seed,
                "perturbation",
                &[TRAIN_NOISE_STREAM, epoch as u64, step as u64],
            );
            let (loss, grads) = test_time_loss_grads(space, &nets, &x, noise_seed, cfg)?;
            if !loss.is_finite() {
                return Err(SimError::NonFinite(format!(
                    "adaptation loss diverged at epoch {epoch}, step {step}"
                )));
            }
            opt.step(&mut params, &grads);
            nets.set_from_flat(&params);
        }
        let (l, p, s) = evaluate(&nets)?;
        loss_trace.push(l);
        epoch_predictions.push(p);
        routing_stats.push(s);
        nets_by_epoch.push(nets.clone());
    }

    // lowest mean unsupervised loss wins; ties break to the earliest epoch
    let mut best_epoch = 0;
    for (i, &l) in loss_trace.iter().enumerate() {
        if l < loss_trace[best_epoch] {
            best_epoch = i;
        }
    }
    Ok(AdaptOutcome {
        best_epoch,
        predictions: epoch_predictions[best_epoch].clone(),
        loss_trace,
        epoch_predictions,
        routing_stats,
        best_nets: nets_by_epoch.swap_remove(best_epoch),
    })
}

fn pack_images(images: &[Tensor4D], indices: &[usize]) -> Tensor4D {
    let [_, c, h, w] = images[indices[0]].shape();
    let mut x = Tensor4D::zeros([indices.len(), c, h, w]);
    for (slot, &i) in indices.iter().enumerate() {
        for ch in 0..c {
            x.plane_mut(slot, ch).copy_from_slice(images[i].plane(0, ch));
        }
    }
    x
}
