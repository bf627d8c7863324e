//! Per-layer gradient sets, structurally congruent to a model's trainable
//! parameters (BN running stats excluded).

use crate::error::{NnError, Result};
use crate::layer::{LayerKind, LayerParams};
use crate::model::ModelWeights;
use crate::tensor::Tensor4D;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Conv { weight: Tensor4D, bias: Vec<f64> },
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    architecture_id: String,
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelWeights) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| match l.spec.kind {
                LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                    let k = l.spec.kernel_size();
                    LayerGrad::Conv {
                        weight: Tensor4D::zeros([l.spec.out_channels, l.spec.in_channels, k, k]),
                        bias: vec![0.0; l.spec.out_channels],
                    }
                }
                LayerKind::BatchNorm => LayerGrad::BatchNorm {
                    gamma: vec![0.0; l.spec.out_channels],
                    beta: vec![0.0; l.spec.out_channels],
                },
                _ => LayerGrad::None,
            })
            .collect();
        GradientSet {
            architecture_id: model.architecture_id().to_string(),
            layers,
        }
    }

    pub fn architecture_id(&self) -> &str {
        &self.architecture_id
    }

    pub fn check_congruent(&self, other: &GradientSet) -> Result<()> {
        if self.architecture_id != other.architecture_id {
            return Err(NnError::ArchMismatch(
                self.architecture_id.clone(),
                other.architecture_id.clone(),
            ));
        }
        Ok(())
    }

    /// `self += alpha * other`, elementwise.
    pub fn add_scaled(&mut self, other: &GradientSet, alpha: f64) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (
                    LayerGrad::Conv { weight: wa, bias: ba },
                    LayerGrad::Conv { weight: wb, bias: bb },
                ) => {
                    for (x, y) in wa.data_mut().iter_mut().zip(wb.data()) {
                        *x += alpha * y;
                    }
                    for (x, y) in ba.iter_mut().zip(bb) {
                        *x += alpha * y;
                    }
                }
                (
                    LayerGrad::BatchNorm { gamma: ga, beta: ba },
                    LayerGrad::BatchNorm { gamma: gb, beta: bb },
                ) => {
                    for (x, y) in ga.iter_mut().zip(gb) {
                        *x += alpha * y;
                    }
                    for (x, y) in ba.iter_mut().zip(bb) {
                        *x += alpha * y;
                    }
                }
                (LayerGrad::None, LayerGrad::None) => {}
                _ => {
                    return Err(NnError::ArchMismatch(
                        self.architecture_id.clone(),
                        other.architecture_id.clone(),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.for_each_mut(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|v| ok &= v.is_finite());
        ok
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        self.for_each(|v| m = m.max(v.abs()));
        m
    }

    pub fn for_each(&self, mut f: impl FnMut(f64)) {
        for l in &self.layers {
            match l {
                LayerGrad::Conv { weight, bias } => {
                    weight.data().iter().for_each(|&v| f(v));
                    bias.iter().for_each(|&v| f(v));
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    gamma.iter().for_each(|&v| f(v));
                    beta.iter().for_each(|&v| f(v));
                }
                LayerGrad::None => {}
            }
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            match l {
                LayerGrad::Conv { weight, bias } => {
                    weight.data_mut().iter_mut().for_each(&mut f);
                    bias.iter_mut().for_each(&mut f);
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    gamma.iter_mut().for_each(&mut f);
                    beta.iter_mut().for_each(&mut f);
                }
                LayerGrad::None => {}
            }
        }
    }

    /// Flattens all gradient entries in layer order (test utility).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each(|v| out.push(v));
        out
    }

    /// Gradient implied by a weight move: `(before - after) * scale` over
    /// trainable parameters. With plain SGD and `scale = 1/lr` this equals
    /// the sum of per-step gradients exactly (telescoping).
    pub fn from_model_diff(before: &ModelWeights, after: &ModelWeights, scale: f64) -> Result<Self> {
        before.check_same_arch(after)?;
        let mut out = GradientSet::zeros_like(before);
        for ((g, a), b) in out
            .layers
            .iter_mut()
            .zip(before.layers().iter())
            .zip(after.layers().iter())
        {
            match (g, &a.params, &b.params) {
                (
                    LayerGrad::Conv { weight, bias },
                    LayerParams::Conv { weight: wa, bias: ba },
                    LayerParams::Conv { weight: wb, bias: bb },
                ) => {
                    for ((d, x), y) in weight.data_mut().iter_mut().zip(wa.data()).zip(wb.data()) {
                        *d = (x - y) * scale;
                    }
                    for ((d, x), y) in bias.iter_mut().zip(ba).zip(bb) {
                        *d = (x - y) * scale;
                    }
                }
                (
                    LayerGrad::BatchNorm { gamma, beta },
                    LayerParams::BatchNorm { gamma: ga, beta: ba, .. },
                    LayerParams::BatchNorm { gamma: gb, beta: bb, .. },
                ) => {
                    for ((d, x), y) in gamma.iter_mut().zip(ga).zip(gb) {
                        *d = (x - y) * scale;
                    }
                    for ((d, x), y) in beta.iter_mut().zip(ba).zip(bb) {
                        *d = (x - y) * scale;
                    }
                }
                (LayerGrad::None, LayerParams::None, LayerParams::None) => {}
                _ => unreachable!("same architecture_id implies same layer kinds"),
            }
        }
        Ok(out)
    }
}

/// Applies `model -= step * grads` to trainable parameters only.
pub(crate) fn apply_scaled_to_model(
    model: &mut ModelWeights,
    grads: &GradientSet,
    step: f64,
) -> Result<()> {
    if model.architecture_id() != grads.architecture_id {
        return Err(NnError::ArchMismatch(
            model.architecture_id().to_string(),
            grads.architecture_id.clone(),
        ));
    }
    for (layer, grad) in model.layers_mut().iter_mut().zip(&grads.layers) {
        match (&mut layer.params, grad) {
            (
                LayerParams::Conv { weight, bias },
                LayerGrad::Conv { weight: gw, bias: gb },
            ) => {
                for (p, g) in weight.data_mut().iter_mut().zip(gw.data()) {
                    *p -= step * g;
                }
                for (p, g) in bias.iter_mut().zip(gb) {
                    *p -= step * g;
                }
            }
            (
                LayerParams::BatchNorm { gamma, beta, .. },
                LayerGrad::BatchNorm { gamma: gg, beta: gb },
            ) => {
                for (p, g) in gamma.iter_mut().zip(gg) {
                    *p -= step * g;
                }
                for (p, g) in beta.iter_mut().zip(gb) {
                    *p -= step * g;
                }
            }
            (LayerParams::None, LayerGrad::None) => {}
            _ => {
                return Err(NnError::ArchMismatch(
                    model.architecture_id().to_string(),
                    grads.architecture_id.clone(),
                ))
            }
        }
    }
    Ok(())
}
