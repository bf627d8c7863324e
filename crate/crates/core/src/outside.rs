//! Outside-client evaluation strategies behind a common trait, selected by
//! name: deploy the global model as-is, average member performance, ensemble
//! member logits, or run test-time routing.

use fedroute_nn::ModelWeights;

use crate::data::SegmentationSample;
use crate::error::{Result, SimError};
use crate::metrics::{baseline_average, baseline_ensemble, evaluate_model, DiceScore};
use crate::routing::{adapt, AdaptConfig, AdaptOutcome, RoutingSpace};

/// Inputs shared by every outside strategy. `personalized` are the K inside
/// adapted models; `global` is the server model; the routing space is built
/// from both. Labels in `test` are used for scoring only — the routed
/// strategy adapts on the images alone.
pub struct OutsideContext<'a> {
    pub personalized: &'a [ModelWeights],
    pub global: &'a ModelWeights,
    pub test: &'a [SegmentationSample],
    pub classes: usize,
    pub adapt_cfg: AdaptConfig,
    pub seed: u64,
}

pub struct StrategyOutcome {
    pub name: &'static str,
    pub dice: DiceScore,
    /// Present for the routed strategy only.
    pub adapt: Option<AdaptOutcome>,
}

pub trait OutsideStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, ctx: &OutsideContext) -> Result<StrategyOutcome>;
}

/// Names accepted by [`outside_strategy`], in reporting order.
pub const OUTSIDE_STRATEGIES: &[&str] = &["global", "average", "ensemble", "routed"];

pub fn outside_strategy(name: &str) -> Result<Box<dyn OutsideStrategy>> {
    match name {
        "global" => Ok(Box::new(GlobalStrategy)),
        "average" => Ok(Box::new(AverageStrategy)),
        "ensemble" => Ok(Box::new(EnsembleStrategy)),
        "routed" => Ok(Box::new(RoutedStrategy)),
        other => Err(SimError::config(
            "strategy",
            format!("unknown outside strategy `{other}` (expected one of {OUTSIDE_STRATEGIES:?})"),
        )),
    }
}

/// All registered strategies in reporting order.
pub fn all_outside_strategies() -> Vec<Box<dyn OutsideStrategy>> {
    OUTSIDE_STRATEGIES
        .iter()
        .map(|n| outside_strategy(n).expect("registered name"))
        .collect()
}

/// Deploys the FedAvg global model unchanged.
struct GlobalStrategy;

impl OutsideStrategy for GlobalStrategy {
    fn name(&self) -> &'static str {
        "global"
    }

    fn run(&self, ctx: &OutsideContext) -> Result<StrategyOutcome> {
        Ok(StrategyOutcome {
            name: self.name(),
            dice: evaluate_model(ctx.global, ctx.test, ctx.classes)?,
            adapt: None,
        })
    }
}

/// Mean over the personalized members of each member's own Dice.
struct AverageStrategy;

impl OutsideStrategy for AverageStrategy {
    fn name(&self) -> &'static str {
        "average"
    }

    fn run(&self, ctx: &OutsideContext) -> Result<StrategyOutcome> {
        let members: Vec<&ModelWeights> = ctx.personalized.iter().collect();
        Ok(StrategyOutcome {
            name: self.name(),
            dice: baseline_average(&members, ctx.test, ctx.classes)?,
            adapt: None,
        })
    }
}

/// Per-pixel mean of the personalized members' logits, then softmax/argmax.
struct EnsembleStrategy;

impl OutsideStrategy for EnsembleStrategy {
    fn name(&self) -> &'static str {
        "ensemble"
    }

    fn run(&self, ctx: &OutsideContext) -> Result<StrategyOutcome> {
        let members: Vec<&ModelWeights> = ctx.personalized.iter().collect();
        Ok(StrategyOutcome {
            name: self.name(),
            dice: baseline_ensemble(&members, ctx.test, ctx.classes)?,
            adapt: None,
        })
    }
}

/// Test-time routing over personalized members plus the global model.
struct RoutedStrategy;

impl OutsideStrategy for RoutedStrategy {
    fn name(&self) -> &'static str {
        "routed"
    }

    fn run(&self, ctx: &OutsideContext) -> Result<StrategyOutcome> {
        let space = RoutingSpace::new(ctx.personalized.to_vec(), ctx.global.clone())?;
        let images: Vec<_> = ctx.test.iter().map(|s| s.image.clone()).collect();
        let outcome = adapt(&space, &images, &ctx.adapt_cfg, ctx.seed)?;
        let dice = DiceScore::from_masks(&outcome.predictions, ctx.test, ctx.classes);
        Ok(StrategyOutcome {
            name: self.name(),
            dice,
            adapt: Some(outcome),
        })
    }
}
