//! Declarative experiment configuration and the seed-level run primitives
//! the command harness is built from.

use serde::{Deserialize, Serialize};

use fedroute_nn::rng::derive_seed;
use fedroute_nn::{build_tiny_unet, ModelWeights};

use crate::data::{generate_client, split, ClientShift};
use crate::error::{Result, SimError};
use crate::fed::{
    run_federation, train_single_site, ClientData, FedHyper, FederationOutcome,
    PersonalizationSettings,
};
use crate::metrics::{evaluate_model, DiceScore};
use crate::outside::{all_outside_strategies, OutsideContext, StrategyOutcome};
use crate::personalize::PERSONALIZATION_VARIANTS;
use crate::routing::AdaptConfig;

fn default_true() -> bool {
    true
}

fn default_model_width() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_local: f64,
    pub lr_global: f64,
    /// `sgd` (default, keeps the gradient identities exact) or `adam`.
    pub optimizer: String,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Save a global checkpoint every N rounds (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Also train the per-client single-site baseline.
    #[serde(default)]
    pub include_single_site: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizationSection {
    pub variant: String,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingSection {
    pub beta: f64,
    pub window_radius: usize,
    pub epochs: usize,
    pub adapt_lr: f64,
    pub adapt_batch: usize,
    pub noise_sigma: f64,
}

impl RoutingSection {
    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            epochs: self.epochs,
            lr: self.adapt_lr,
            batch: self.adapt_batch,
            beta: self.beta,
            radius: self.window_radius,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub classes: usize,
    pub image_size: usize,
    #[serde(default = "default_model_width")]
    pub model_width: usize,
    pub split: (f64, f64, f64),
    pub inside_shifts: Vec<ClientShift>,
    pub outside_shift: ClientShift,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub master: u64,
    pub count: usize,
}

impl SeedsSection {
    /// The master seeds of the individual runs: `master, master+1, ...`.
    pub fn masters(&self) -> Vec<u64> {
        (0..self.count as u64).map(|i| self.master.wrapping_add(i)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub federation: FederationSection,
    pub personalization: PersonalizationSection,
    pub routing: RoutingSection,
    pub data: DataSection,
    pub seeds: SeedsSection,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| SimError::Config {
            field: "config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        if f.batch_size == 0 {
            return Err(SimError::config("federation.batch_size", "must be >= 1"));
        }
        if f.lr_local <= 0.0 || !f.lr_local.is_finite() {
            return Err(SimError::config("federation.lr_local", "must be positive"));
        }
        if f.lr_global < 0.0 || !f.lr_global.is_finite() {
            return Err(SimError::config("federation.lr_global", "must be >= 0"));
        }
        if !fedroute_nn::UPDATE_RULE_NAMES.contains(&f.optimizer.as_str()) {
            return Err(SimError::config(
                "federation.optimizer",
                format!("unknown optimizer `{}`", f.optimizer),
            ));
        }
        let p = &self.personalization;
        if !PERSONALIZATION_VARIANTS.contains(&p.variant.as_str()) {
            return Err(SimError::config(
                "personalization.variant",
                format!("unknown variant `{}`", p.variant),
            ));
        }
        if !(p.tau > 0.0 && p.tau <= 1.0) {
            return Err(SimError::config(
                "personalization.tau",
                format!("must be in (0, 1], got {}", p.tau),
            ));
        }
        let r = &self.routing;
        if r.beta < 0.0 || !r.beta.is_finite() {
            return Err(SimError::config("routing.beta", "must be >= 0"));
        }
        if r.window_radius == 0 {
            return Err(SimError::config("routing.window_radius", "must be >= 1"));
        }
        if r.adapt_lr <= 0.0 {
            return Err(SimError::config("routing.adapt_lr", "must be positive"));
        }
        if r.adapt_batch == 0 {
            return Err(SimError::config("routing.adapt_batch", "must be >= 1"));
        }
        if r.noise_sigma < 0.0 {
            return Err(SimError::config("routing.noise_sigma", "must be >= 0"));
        }
        let d = &self.data;
        if d.classes != 2 && d.classes != 3 {
            return Err(SimError::config("data.classes", format!("must be 2 or 3, got {}", d.classes)));
        }
        if d.image_size == 0 || d.image_size % 4 != 0 {
            return Err(SimError::config(
                "data.image_size",
                format!("must be a positive multiple of 4, got {}", d.image_size),
            ));
        }
        if d.model_width < 4 {
            return Err(SimError::config("data.model_width", "must be >= 4"));
        }
        let (a, b, c) = d.split;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(SimError::config(
                "data.split",
                format!("fractions must be non-negative and sum to 1, got ({a}, {b}, {c})"),
            ));
        }
        if d.inside_shifts.is_empty() {
            return Err(SimError::config("data.inside_shifts", "need at least one inside client"));
        }
        for (k, s) in d.inside_shifts.iter().enumerate() {
            s.validate(&format!("data.inside_shifts[{k}]"), d.image_size)?;
        }
        d.outside_shift.validate("data.outside_shift", d.image_size)?;
        if self.seeds.count == 0 {
            return Err(SimError::config("seeds.count", "must be >= 1"));
        }
        Ok(())
    }

    pub fn inside_client_count(&self) -> usize {
        self.data.inside_shifts.len()
    }

    /// Index of the designated outside client in the roster.
    pub fn outside_client_index(&self) -> usize {
        self.data.inside_shifts.len()
    }

    /// Shift of roster client `k`; inside clients first, outside client last.
    pub fn roster_shift(&self, k: usize) -> Result<&ClientShift> {
        if k < self.data.inside_shifts.len() {
            Ok(&self.data.inside_shifts[k])
        } else if k == self.data.inside_shifts.len() {
            Ok(&self.data.outside_shift)
        } else {
            Err(SimError::InvalidInput(format!(
                "client index {k} out of range (roster has {} clients)",
                self.data.inside_shifts.len() + 1
            )))
        }
    }

    pub fn fed_hyper(&self) -> FedHyper {
        FedHyper {
            rounds: self.federation.rounds,
            local_epochs: self.federation.local_epochs,
            batch_size: self.federation.batch_size,
            lr_local: self.federation.lr_local,
            lr_global: self.federation.lr_global,
            optimizer: self.federation.optimizer.clone(),
            augment: self.federation.augment,
        }
    }

    pub fn personalization_settings(&self) -> PersonalizationSettings {
        PersonalizationSettings {
            variant: self.personalization.variant.clone(),
            tau: self.personalization.tau,
        }
    }

    /// The default desk-scale federation: four heterogeneous inside clients
    /// and one outside client whose shift (inverted intensity, highest
    /// noise) lies outside the inside clients' range.
    pub fn default_desk_scale() -> Self {
        let shift = |scale: f64, offset: f64, noise: f64, freq: f64, r0: f64, r1: f64, e0: f64, e1: f64| ClientShift {
            intensity_scale: scale,
            intensity_offset: offset,
            noise_sigma: noise,
            texture_freq: freq,
            fg_radius_range: (r0, r1),
            eccentricity_range: (e0, e1),
            n_samples: 60,
        };
        ExperimentConfig {
            federation: FederationSection {
                rounds: 30,
                local_epochs: 1,
                batch_size: 16,
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
                epochs: 10,
                adapt_lr: 1e-3,
                adapt_batch: 4,
                noise_sigma: 0.5,
            },
            data: DataSection {
                classes: 2,
                image_size: 32,
                model_width: 8,
                split: (0.64, 0.16, 0.20),
                inside_shifts: vec![
                    shift(1.0, 0.0, 0.05, 2.0, 6.0, 9.0, 0.0, 0.3),
                    shift(1.3, 0.4, 0.10, 4.0, 5.0, 8.0, 0.2, 0.5),
                    shift(0.8, -0.3, 0.15, 6.0, 7.0, 10.0, 0.3, 0.6),
                    shift(-1.0, 0.1, 0.20, 3.0, 4.0, 7.0, 0.1, 0.4),
                ],
                outside_shift: shift(-0.9, 0.2, 0.30, 5.0, 6.0, 9.0, 0.1, 0.4),
            },
            seeds: SeedsSection { master: 17, count: 3 },
            output_dir: "runs/default".into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Seed-level run primitives
// ---------------------------------------------------------------------------

/// Builds roster client `k`'s dataset and splits it. The dataset depends
/// only on `(master, k)`, so a client's data is identical whether it plays
/// the inside or outside role.
pub fn build_client(cfg: &ExperimentConfig, k: usize, master: u64) -> Result<ClientData> {
    let shift = cfg.roster_shift(k)?;
    let ds = generate_client(shift, cfg.data.classes, cfg.data.image_size, derive_seed(master, "data", &[k as u64]))?;
    let (train, val, test) = split(&ds, cfg.data.split, derive_seed(master, "data", &[k as u64, 1]))?;
    Ok(ClientData::from_splits(k, train, val, test))
}

/// The outside role uses every sample of the client as unlabeled test data.
pub fn build_outside_client(cfg: &ExperimentConfig, k: usize, master: u64) -> Result<ClientData> {
    let shift = cfg.roster_shift(k)?;
    let ds = generate_client(shift, cfg.data.classes, cfg.data.image_size, derive_seed(master, "data", &[k as u64]))?;
    Ok(ClientData {
        id: k,
        train: Vec::new(),
        val: Vec::new(),
        test: ds.samples,
        classes: ds.classes,
    })
}

pub fn initial_model(cfg: &ExperimentConfig, master: u64) -> Result<ModelWeights> {
    build_tiny_unet(1, cfg.data.classes, cfg.data.model_width, derive_seed(master, "init", &[]))
        .map_err(SimError::Engine)
}

/// Per-client inside evaluation of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InsideClientEval {
    pub client_id: usize,
    pub best_round: usize,
    pub personalized: DiceScore,
    pub global: DiceScore,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub single_site: Option<DiceScore>,
}

pub struct TrainRun {
    pub outcome: FederationOutcome,
    pub inside_eval: Vec<InsideClientEval>,
    pub insiders: Vec<usize>,
}

/// One federated training run on the given insider roster indices.
pub fn run_train_seed(cfg: &ExperimentConfig, insiders: &[usize], master: u64) -> Result<TrainRun> {
    let clients: Vec<ClientData> = insiders
        .iter()
        .map(|&k| build_client(cfg, k, master))
        .collect::<Result<_>>()?;
    let init = initial_model(cfg, master)?;
    let outcome = run_federation(
        &clients,
        init.clone(),
        &cfg.fed_hyper(),
        &cfg.personalization_settings(),
        master,
    )?;
    let mut inside_eval = Vec::with_capacity(clients.len());
    for (i, data) in clients.iter().enumerate() {
        let track = &outcome.personalized[i];
        let personalized = evaluate_model(&track.best, &data.test, data.classes)?;
        let global = evaluate_model(&outcome.server.global, &data.test, data.classes)?;
        let single_site = if cfg.federation.include_single_site {
            let (best, _) = train_single_site(data, init.clone(), &cfg.fed_hyper(), master)?;
            Some(evaluate_model(&best, &data.test, data.classes)?)
        } else {
            None
        };
        inside_eval.push(InsideClientEval {
            client_id: data.id,
            best_round: track.best_round,
            personalized,
            global,
            single_site,
        });
    }
    Ok(TrainRun {
        outcome,
        inside_eval,
        insiders: insiders.to_vec(),
    })
}

/// Runs every outside strategy on the holdout client.
pub fn run_outside_seed(
    cfg: &ExperimentConfig,
    personalized: &[ModelWeights],
    global: &ModelWeights,
    holdout: usize,
    master: u64,
) -> Result<Vec<StrategyOutcome>> {
    let outside = build_outside_client(cfg, holdout, master)?;
    let ctx = OutsideContext {
        personalized,
        global,
        test: &outside.test,
        classes: outside.classes,
        adapt_cfg: cfg.routing.adapt_config(),
        seed: master,
    };
    all_outside_strategies()
        .iter()
        .map(|s| s.run(&ctx))
        .collect()
}
