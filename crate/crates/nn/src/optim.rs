//! Update rules behind a common trait, selected by name at runtime.

use crate::error::{NnError, Result};
use crate::grad::GradientSet;
use crate::model::ModelWeights;

/// A parameter update rule. Implementations keep their own state (step
/// counts, moment estimates) and apply one step per call.
pub trait UpdateRule: Send {
    fn name(&self) -> &'static str;
    fn learning_rate(&self) -> f64;
    /// Applies one update step. Errors on non-finite gradients so divergence
    /// surfaces at the step that produced it.
    fn step(&mut self, model: &mut ModelWeights, grads: &GradientSet) -> Result<()>;
}

/// Names accepted by [`update_rule`].
pub const UPDATE_RULE_NAMES: &[&str] = &["sgd", "adam"];

/// Looks an update rule up by name.
pub fn update_rule(name: &str, learning_rate: f64) -> Result<Box<dyn UpdateRule>> {
    if learning_rate <= 0.0 {
        return Err(NnError::InvalidArgument(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    match name {
        "sgd" => Ok(Box::new(Sgd { lr: learning_rate })),
        "adam" => Ok(Box::new(Adam::new(learning_rate))),
        other => Err(NnError::InvalidArgument(format!(
            "unknown update rule `{other}` (expected one of {UPDATE_RULE_NAMES:?})"
        ))),
    }
}

fn check_finite(grads: &GradientSet) -> Result<()> {
    if !grads.is_finite() {
        return Err(NnError::NonFinite {
            context: "gradient set passed to update rule".into(),
        });
    }
    Ok(())
}

/// Plain stochastic gradient descent: `p <- p - lr * g`.
pub struct Sgd {
    pub lr: f64,
}

impl UpdateRule for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn step(&mut self, model: &mut ModelWeights, grads: &GradientSet) -> Result<()> {
        check_finite(grads)?;
        model.apply_scaled_gradients(grads, self.lr)
    }
}

/// Adam with standard bias-corrected moment estimates.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Option<GradientSet>,
    v: Option<GradientSet>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: None,
            v: None,
        }
    }
}

impl UpdateRule for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn step(&mut self, model: &mut ModelWeights, grads: &GradientSet) -> Result<()> {
        check_finite(grads)?;
        if self.m.is_none() {
            let mut z = grads.clone();
            z.scale(0.0);
            self.m = Some(z.clone());
            self.v = Some(z);
        }
        let m = self.m.as_mut().expect("initialized above");
        let v = self.v.as_mut().expect("initialized above");
        m.check_congruent(grads)?;
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        // m <- b1 m + (1-b1) g ;  v <- b2 v + (1-b2) g^2
        m.scale(b1);
        m.add_scaled(grads, 1.0 - b1)?;
        let mut g2 = grads.clone();
        g2.for_each_mut(|x| *x *= *x);
        v.scale(b2);
        v.add_scaled(&g2, 1.0 - b2)?;
        // delta = lr * mhat / (sqrt(vhat) + eps), applied as p -= delta
        let mc = 1.0 / (1.0 - b1.powi(t));
        let vc = 1.0 / (1.0 - b2.powi(t));
        let mut delta = m.clone();
        let vflat = v.to_flat();
        let mut i = 0;
        let eps = self.eps;
        delta.for_each_mut(|x| {
            let vhat = vflat[i] * vc;
            *x = (*x * mc) / (vhat.sqrt() + eps);
            i += 1;
        });
        model.apply_scaled_gradients(&delta, self.lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{Layer, LayerKind, LayerParams, LayerSpec, NodeInput};
    use crate::tensor::Tensor4D;

    fn scalar_model(p: f64) -> ModelWeights {
        ModelWeights::new(vec![Layer {
            name: "w".into(),
            spec: LayerSpec {
                kind: LayerKind::Conv1x1,
                in_channels: 1,
                out_channels: 1,
            },
            params: LayerParams::Conv {
                weight: Tensor4D::from_vec([1, 1, 1, 1], vec![p]).unwrap(),
                bias: vec![0.0],
            },
            inputs: vec![NodeInput::Image],
        }])
        .unwrap()
    }

    fn scalar_grad(model: &ModelWeights, g: f64) -> GradientSet {
        let mut gs = GradientSet::zeros_like(model);
        if let crate::grad::LayerGrad::Conv { weight, .. } = &mut gs.layers[0] {
            weight.data_mut()[0] = g;
        }
        gs
    }

    fn scalar_param(model: &ModelWeights) -> f64 {
        match &model.layers()[0].params {
            LayerParams::Conv { weight, .. } => weight.data()[0],
            _ => unreachable!(),
        }
    }

    #[test]
    fn sgd_arithmetic() {
        // p=1, g=2, lr=0.5 -> p'=0
        let mut m = scalar_model(1.0);
        let g = scalar_grad(&m, 2.0);
        update_rule("sgd", 0.5).unwrap().step(&mut m, &g).unwrap();
        assert_eq!(scalar_param(&m), 0.0);
    }

    #[test]
    fn zero_grads_leave_model_bitwise_unchanged() {
        let mut m = scalar_model(0.123456789);
        let before = m.weights_checksum();
        let g = scalar_grad(&m, 0.0);
        let mut sgd = update_rule("sgd", 1e-3).unwrap();
        sgd.step(&mut m, &g).unwrap();
        assert_eq!(m.weights_checksum(), before);
        let mut adam = update_rule("adam", 1e-3).unwrap();
        adam.step(&mut m, &g).unwrap();
        assert_eq!(m.weights_checksum(), before);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        // p=0, g=1: mhat = vhat = 1, so p' ~= -lr
        let mut m = scalar_model(0.0);
        let g = scalar_grad(&m, 1.0);
        update_rule("adam", 1e-3).unwrap().step(&mut m, &g).unwrap();
        assert!((scalar_param(&m) + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut m = scalar_model(1.0);
        let g = scalar_grad(&m, f64::NAN);
        let err = update_rule("sgd", 0.1).unwrap().step(&mut m, &g);
        assert!(err.is_err());
    }

    #[test]
    fn unknown_rule_name_errors() {
        assert!(update_rule("rmsprop", 0.1).is_err());
    }
}
