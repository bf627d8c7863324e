//! Per-client adapted models built from accumulated local and global
//! gradients.
//!
//! The update rule exists in three variants behind a common trait, selected
//! by name from the config. `ema-update` applies the round's mixed gradient
//! step damped by the accumulation rate. `ema-snapshot` blends toward the
//! client model after the round's mixed update, so the accumulation rate 1
//! discards all history. `literal` scales the previous adapted model by
//! `1 - tau` before subtracting the mixed step; it collapses the weights and
//! is retained for auditability only.

use fedroute_nn::{GradientSet, ModelWeights};

use crate::error::{Result, SimError};

/// A client's adapted model plus its accumulation rate.
#[derive(Debug, Clone)]
pub struct PersonalizedModel {
    pub weights: ModelWeights,
    pub tau: f64,
}

/// Everything one communication round feeds the update rule.
pub struct RoundContext<'a> {
    /// Sum of the client's per-step local gradients this round.
    pub local: &'a GradientSet,
    /// Server-aggregated mean of all clients' local gradient sums.
    pub global: &'a GradientSet,
    pub lr_local: f64,
    pub lr_global: f64,
    /// Client model after the round's mixed update (local steps followed by
    /// the global step), used by the snapshot variant.
    pub round_snapshot: &'a ModelWeights,
}

impl RoundContext<'_> {
    /// `lr_local * local + lr_global * global`, the round's mixed step.
    fn mixed_step(&self) -> Result<GradientSet> {
        let mut mixed = self.local.clone();
        mixed.scale(self.lr_local);
        mixed.add_scaled(self.global, self.lr_global)?;
        Ok(mixed)
    }
}

/// One variant of the adapted-model update, applied once per round after
/// aggregation.
pub trait PersonalizationRule: Send + Sync {
    fn name(&self) -> &'static str;
    fn round_update(&self, p: &mut PersonalizedModel, ctx: &RoundContext) -> Result<()>;
}

/// Variant names accepted by [`personalization_rule`].
pub const PERSONALIZATION_VARIANTS: &[&str] = &["ema-update", "ema-snapshot", "literal"];

/// Looks a personalization variant up by name.
pub fn personalization_rule(name: &str) -> Result<Box<dyn PersonalizationRule>> {
    match name {
        "ema-update" => Ok(Box::new(EmaUpdate)),
        "ema-snapshot" => Ok(Box::new(EmaSnapshot)),
        "literal" => Ok(Box::new(Literal)),
        other => Err(SimError::config(
            "personalization.variant",
            format!("unknown variant `{other}` (expected one of {PERSONALIZATION_VARIANTS:?})"),
        )),
    }
}

/// `P <- P - tau * (lr_l * local + lr_g * global)`.
pub struct EmaUpdate;

impl PersonalizationRule for EmaUpdate {
    fn name(&self) -> &'static str {
        "ema-update"
    }

    fn round_update(&self, p: &mut PersonalizedModel, ctx: &RoundContext) -> Result<()> {
        let mixed = ctx.mixed_step()?;
        p.weights.apply_scaled_gradients(&mixed, p.tau)?;
        Ok(())
    }
}

/// `P <- (1 - tau) * P + tau * u` where `u` is the round snapshot.
pub struct EmaSnapshot;

impl PersonalizationRule for EmaSnapshot {
    fn name(&self) -> &'static str {
        "ema-snapshot"
    }

    fn round_update(&self, p: &mut PersonalizedModel, ctx: &RoundContext) -> Result<()> {
        p.weights.blend_trainable(ctx.round_snapshot, p.tau)?;
        Ok(())
    }
}

/// `P <- (1 - tau) * P - tau * (lr_l * local + lr_g * global)`, exactly as
/// printed. Known to collapse weights for tau near 1.
pub struct Literal;

impl PersonalizationRule for Literal {
    fn name(&self) -> &'static str {
        "literal"
    }

    fn round_update(&self, p: &mut PersonalizedModel, ctx: &RoundContext) -> Result<()> {
        let mixed = ctx.mixed_step()?;
        p.weights.scale_trainable(1.0 - p.tau);
        p.weights.apply_scaled_gradients(&mixed, p.tau)?;
        Ok(())
    }
}

/// Index of the checkpoint with maximal validation Dice; ties resolve to the
/// earliest round.
pub fn select_best(val_dice_trace: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &d) in val_dice_trace.iter().enumerate() {
        match best {
            Some((_, bd)) if d <= bd => {}
            _ => best = Some((i, d)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_best_cases() {
        assert_eq!(select_best(&[]), None);
        assert_eq!(select_best(&[0.4]), Some(0));
        assert_eq!(select_best(&[0.1, 0.2, 0.3]), Some(2));
        // tie breaks to the earliest
        assert_eq!(select_best(&[0.5, 0.8, 0.8]), Some(1));
    }

    #[test]
    fn unknown_variant_errors() {
        assert!(personalization_rule("moving-average").is_err());
        for name in PERSONALIZATION_VARIANTS {
            assert!(personalization_rule(name).is_ok());
        }
    }
}
