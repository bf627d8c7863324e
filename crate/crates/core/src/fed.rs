//! Federated round engine: local training that returns summed per-step
//! gradients, server aggregation, the global gradient step, and the
//! per-round adapted-model hook.

use rayon::prelude::*;

use fedroute_nn::rng::derive_rng;
use fedroute_nn::{update_rule, GradientSet, ModelWeights};
use rand::Rng;

use crate::data::{augment_with, pack_batch, ClientDataset, SegmentationSample};
use crate::error::{Result, SimError};
use crate::loss::seg_loss_and_grad;
use crate::metrics::evaluate_model;
use crate::personalize::{personalization_rule, PersonalizedModel, RoundContext};

/// Training hyper-parameters shared by all clients.
#[derive(Debug, Clone)]
pub struct FedHyper {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_local: f64,
    pub lr_global: f64,
    /// `sgd` keeps the summed-gradient identity exact; `adam` switches the
    /// returned local gradient to the effective form `(w_before - w_after) / lr`.
    pub optimizer: String,
    pub augment: bool,
}

/// One client's split data.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub id: usize,
    pub train: Vec<SegmentationSample>,
    pub val: Vec<SegmentationSample>,
    pub test: Vec<SegmentationSample>,
    pub classes: usize,
}

impl ClientData {
    pub fn from_splits(
        id: usize,
        train: ClientDataset,
        val: ClientDataset,
        test: ClientDataset,
    ) -> Self {
        let classes = train.classes;
        ClientData {
            id,
            train: train.samples,
            val: val.samples,
            test: test.samples,
            classes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: ModelWeights,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelWeights,
    pub lr_global: f64,
    pub round: usize,
}

/// One row of the round trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    pub client_id: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

/// Runs `m_k = ceil(n_train / batch) * local_epochs` minibatch steps on the
/// client model and returns the sum of per-step gradients plus the per-step
/// loss trace. The shuffle and augmentation stream depends on `(master,
/// round, epoch)` only, so clients with identical data stay synchronized.
pub fn local_round(
    model: &mut ModelWeights,
    train: &[SegmentationSample],
    hyper: &FedHyper,
    master: u64,
    round: usize,
) -> Result<(GradientSet, Vec<f64>)> {
    let before = model.clone();
    let mut sum = GradientSet::zeros_like(model);
    let mut losses = Vec::new();
    if train.is_empty() || hyper.local_epochs == 0 {
        return Ok((sum, losses));
    }
    let mut opt = update_rule(&hyper.optimizer, hyper.lr_local).map_err(SimError::Engine)?;
    for epoch in 0..hyper.local_epochs {
        let mut rng = derive_rng(master, "training", &[round as u64, epoch as u64]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch_ix in order.chunks(hyper.batch_size.max(1)) {
            let samples: Vec<SegmentationSample> = batch_ix
                .iter()
                .map(|&i| {
                    if hyper.augment {
                        let k = rng.gen_range(0u8..4);
                        let flip = rng.gen_bool(0.5);
                        augment_with(&train[i], k, flip)
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&SegmentationSample> = samples.iter().collect();
            let (x, labels) = pack_batch(&refs);
            let (logits, tape) = model.forward_train(&x)?;
            let (loss, dlogits) = seg_loss_and_grad(&logits, &labels).map_err(|e| match e {
                SimError::NonFinite(_) => SimError::NonFinite(format!(
                    "client loss diverged at round {round}, epoch {epoch}"
                )),
                other => other,
            })?;
            let grads = model.backward(&tape, &dlogits)?;
            sum.add_scaled(&grads, 1.0)?;
            opt.step(model, &grads)?;
            losses.push(loss);
        }
    }
    if hyper.optimizer == "sgd" {
        // telescoping identity: (w_before - w_after)/lr equals the sum
        #[cfg(debug_assertions)]
        {
            let diff = GradientSet::from_model_diff(&before, model, 1.0 / hyper.lr_local)?;
            let mut delta = diff.clone();
            delta.add_scaled(&sum, -1.0)?;
            let scale = sum.max_abs().max(1.0);
            debug_assert!(
                delta.max_abs() <= 1e-9 * scale,
                "telescoping identity violated: {} vs scale {}",
                delta.max_abs(),
                scale
            );
        }
        Ok((sum, losses))
    } else {
        let effective = GradientSet::from_model_diff(&before, model, 1.0 / hyper.lr_local)?;
        Ok((effective, losses))
    }
}

/// Elementwise arithmetic mean of congruent gradient sets.
pub fn aggregate(grads: &[GradientSet]) -> Result<GradientSet> {
    let first = grads
        .first()
        .ok_or_else(|| SimError::InvalidInput("aggregate of zero gradient sets".into()))?;
    let mut mean = first.clone();
    for g in &grads[1..] {
        mean.add_scaled(g, 1.0)?;
    }
    mean.scale(1.0 / grads.len() as f64);
    Ok(mean)
}

/// Global step `w_g <- w_g - lr_g * agg`; BN running stats become the mean
/// of the clients' post-round stats.
pub fn global_update(
    server: &mut ServerState,
    agg: &GradientSet,
    client_models: &[&ModelWeights],
) -> Result<()> {
    server.global.apply_scaled_gradients(agg, server.lr_global)?;
    if !client_models.is_empty() {
        server.global.set_bn_stats_to_mean(client_models)?;
    }
    server.round += 1;
    Ok(())
}

/// Per-client adapted-model record produced by a federation run.
#[derive(Debug, Clone)]
pub struct PersonalizedTrack {
    pub current: PersonalizedModel,
    pub best: ModelWeights,
    pub best_round: usize,
    pub best_val_dice: f64,
    pub val_trace: Vec<f64>,
}

#[derive(Debug)]
pub struct FederationOutcome {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub personalized: Vec<PersonalizedTrack>,
    pub trace: Vec<RoundRow>,
}

#[derive(Debug, Clone)]
pub struct PersonalizationSettings {
    pub variant: String,
    pub tau: f64,
}

/// Runs `T` communication rounds. Per round: broadcast, parallel local
/// training, aggregation, global update, adapted-model update, validation.
/// Deterministic in `master` regardless of client scheduling.
pub fn run_federation(
    clients_data: &[ClientData],
    init: ModelWeights,
    hyper: &FedHyper,
    pers: &PersonalizationSettings,
    master: u64,
) -> Result<FederationOutcome> {
    run_federation_with_hook(clients_data, init, hyper, pers, master, |_, _| Ok(()))
}

/// [`run_federation`] with a callback after each round's global update,
/// used for periodic checkpoints.
pub fn run_federation_with_hook(
    clients_data: &[ClientData],
    init: ModelWeights,
    hyper: &FedHyper,
    pers: &PersonalizationSettings,
    master: u64,
    mut on_round: impl FnMut(usize, &ServerState) -> Result<()>,
) -> Result<FederationOutcome> {
    if clients_data.is_empty() {
        return Err(SimError::InvalidInput("federation with zero clients".into()));
    }
    let rule = personalization_rule(&pers.variant)?;
    let mut server = ServerState {
        global: init.clone(),
        lr_global: hyper.lr_global,
        round: 0,
    };
    let mut clients: Vec<ClientState> = clients_data
        .iter()
        .map(|c| ClientState {
            id: c.id,
            model: init.clone(),
        })
        .collect();
    // P_k^0 = w_k^0 = the initial global model
    let mut personalized: Vec<PersonalizedTrack> = clients_data
        .iter()
        .map(|_| PersonalizedTrack {
            current: PersonalizedModel {
                weights: init.clone(),
                tau: pers.tau,
            },
            best: init.clone(),
            best_round: 0,
            best_val_dice: f64::NEG_INFINITY,
            val_trace: Vec::new(),
        })
        .collect();
    let mut trace = Vec::new();

    for round in 0..hyper.rounds {
        // broadcast: every client resynchronizes to the global model bitwise
        for c in clients.iter_mut() {
            c.model = server.global.clone();
        }
        let step_results: Vec<Result<(GradientSet, Vec<f64>)>> = clients
            .par_iter_mut()
            .zip(clients_data.par_iter())
            .map(|(state, data)| local_round(&mut state.model, &data.train, hyper, master, round))
            .collect();
        let mut local_grads = Vec::with_capacity(clients.len());
        let mut loss_means = Vec::with_capacity(clients.len());
        for r in step_results {
            let (g, losses) = r?;
            let mean = if losses.is_empty() {
                0.0
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            };
            local_grads.push(g);
            loss_means.push(mean);
        }
        let agg = aggregate(&local_grads)?;

        // round snapshots u_k = client model after its mixed update
        let snapshots: Vec<ModelWeights> = clients
            .iter()
            .map(|c| {
                let mut u = c.model.clone();
                u.apply_scaled_gradients(&agg, hyper.lr_global)?;
                Ok(u)
            })
            .collect::<Result<_>>()?;

        let client_models: Vec<&ModelWeights> = clients.iter().map(|c| &c.model).collect();
        global_update(&mut server, &agg, &client_models)?;
        on_round(round, &server)?;

        let val_scores: Vec<Result<f64>> = personalized
            .par_iter_mut()
            .enumerate()
            .map(|(k, track)| {
                let ctx = RoundContext {
                    local: &local_grads[k],
                    global: &agg,
                    lr_local: hyper.lr_local,
                    lr_global: hyper.lr_global,
                    round_snapshot: &snapshots[k],
                };
                rule.round_update(&mut track.current, &ctx)?;
                track.current.weights.copy_bn_stats_from(&clients[k].model)?;
                let dice = if clients_data[k].val.is_empty() {
                    0.0
                } else {
                    evaluate_model(
                        &track.current.weights,
                        &clients_data[k].val,
                        clients_data[k].classes,
                    )?
                    .mean
                };
                Ok(dice)
            })
            .collect();
        for (k, score) in val_scores.into_iter().enumerate() {
            let dice = score?;
            let track = &mut personalized[k];
            track.val_trace.push(dice);
            if dice > track.best_val_dice {
                track.best_val_dice = dice;
                track.best_round = round;
                track.best = track.current.weights.clone();
            }
            trace.push(RoundRow {
                round,
                client_id: clients_data[k].id,
                train_loss: loss_means[k],
                val_dice: dice,
            });
        }
    }

    // T=0: the best checkpoint is the initialization
    for track in personalized.iter_mut() {
        if track.val_trace.is_empty() {
            track.best_val_dice = 0.0;
        }
    }
    Ok(FederationOutcome {
        server,
        clients,
        personalized,
        trace,
    })
}

/// Single-site baseline: one client trains alone with the same budget
/// (`rounds * local_epochs` epochs), tracking the best validation round.
pub fn train_single_site(
    data: &ClientData,
    init: ModelWeights,
    hyper: &FedHyper,
    master: u64,
) -> Result<(ModelWeights, Vec<f64>)> {
    let mut model = init.clone();
    let mut best = init;
    let mut best_dice = f64::NEG_INFINITY;
    let mut val_trace = Vec::new();
    for round in 0..hyper.rounds {
        local_round(&mut model, &data.train, hyper, master, round)?;
        let dice = if data.val.is_empty() {
            0.0
        } else {
            evaluate_model(&model, &data.val, data.classes)?.mean
        };
        val_trace.push(dice);
        if dice > best_dice {
            best_dice = dice;
            best = model.clone();
        }
    }
    if val_trace.is_empty() {
        best = model;
    }
    Ok((best, val_trace))
}
