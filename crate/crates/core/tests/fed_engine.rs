//! Round-engine contracts: gradient summation and the telescoping identity,
//! aggregation, the global step, FedAvg equivalence, synchronization and
//! determinism.

mod common;

use common::*;
use fedroute_core::data::generate_client;
use fedroute_core::experiment::{build_client, initial_model, ExperimentConfig};
use fedroute_core::fed::{
    aggregate, global_update, local_round, run_federation, ClientData, FedHyper, ServerState,
};
use fedroute_core::loss::seg_loss_and_grad;
use fedroute_nn::{average_models, GradientSet};

fn hyper(rounds: usize, optimizer: &str) -> FedHyper {
    FedHyper {
        rounds,
        local_epochs: 1,
        batch_size: 4,
        lr_local: 1e-3,
        lr_global: 1e-3,
        optimizer: optimizer.into(),
        augment: false,
    }
}

fn tiny_clients(cfg: &ExperimentConfig, master: u64) -> Vec<ClientData> {
    (0..cfg.inside_client_count())
        .map(|k| build_client(cfg, k, master).unwrap())
        .collect()
}

#[test]
fn local_round_zero_epochs_is_identity() {
    let cfg = tiny_config();
    let clients = tiny_clients(&cfg, 1);
    let mut model = initial_model(&cfg, 1).unwrap();
    let before = model.weights_checksum();
    let mut h = hyper(1, "sgd");
    h.local_epochs = 0;
    let (grads, losses) = local_round(&mut model, &clients[0].train, &h, 1, 0).unwrap();
    assert_eq!(grads.max_abs(), 0.0);
    assert!(losses.is_empty());
    assert_eq!(model.weights_checksum(), before);
}

#[test]
fn local_round_single_step_returns_that_gradient() {
    let cfg = tiny_config();
    let clients = tiny_clients(&cfg, 2);
    let one_sample = &clients[0].train[..1];
    let mut model = initial_model(&cfg, 2).unwrap();
    let reference = {
        // the same single step, taken by hand (shuffle of one is identity)
        let mut m = model.clone();
        let refs: Vec<_> = one_sample.iter().collect();
        let (x, labels) = fedroute_core::data::pack_batch(&refs);
        let (logits, tape) = m.forward_train(&x).unwrap();
        let (_, dlogits) = seg_loss_and_grad(&logits, &labels).unwrap();
        m.backward(&tape, &dlogits).unwrap()
    };
    let (grads, losses) = local_round(&mut model, one_sample, &hyper(1, "sgd"), 2, 0).unwrap();
    assert_eq!(losses.len(), 1);
    let mut diff = grads.clone();
    diff.add_scaled(&reference, -1.0).unwrap();
    assert_eq!(diff.max_abs(), 0.0, "single-step sum must equal the step gradient");
}

#[test]
fn local_round_telescoping_identity_for_sgd() {
    let cfg = tiny_config();
    let clients = tiny_clients(&cfg, 3);
    let mut model = initial_model(&cfg, 3).unwrap();
    let before = model.clone();
    let h = hyper(1, "sgd"); // 7 train samples, batch 4 -> 2 steps; 3 with more epochs
    let mut h3 = h.clone();
    h3.local_epochs = 3;
    let (sum, losses) = local_round(&mut model, &clients[0].train, &h3, 3, 0).unwrap();
    assert!(losses.len() >= 3);
    let diff = GradientSet::from_model_diff(&before, &model, 1.0 / h3.lr_local).unwrap();
    let mut delta = diff.clone();
    delta.add_scaled(&sum, -1.0).unwrap();
    let scale = sum.max_abs().max(1.0);
    assert!(delta.max_abs() / scale < 1e-10, "telescoping residual {}", delta.max_abs());
}

#[test]
fn local_round_adam_uses_effective_gradient() {
    let cfg = tiny_config();
    let clients = tiny_clients(&cfg, 4);
    let mut model = initial_model(&cfg, 4).unwrap();
    let before = model.clone();
    let h = hyper(1, "adam");
    let (grads, _) = local_round(&mut model, &clients[0].train, &h, 4, 0).unwrap();
    let diff = GradientSet::from_model_diff(&before, &model, 1.0 / h.lr_local).unwrap();
    let mut delta = diff.clone();
    delta.add_scaled(&grads, -1.0).unwrap();
    assert_eq!(delta.max_abs(), 0.0, "adam local gradient is the weight difference / lr");
}

#[test]
fn aggregate_mean_properties() {
    let cfg = tiny_config();
    let model = initial_model(&cfg, 5).unwrap();
    let mut g1 = GradientSet::zeros_like(&model);
    let mut i = 0.0f64;
    g1.for_each_mut(|v| {
        *v = (i * 0.37).sin();
        i += 1.0;
    });
    // K = 1 -> identity
    let one = aggregate(std::slice::from_ref(&g1)).unwrap();
    assert_eq!(one, g1);
    // two opposite sets -> zero
    let mut g2 = g1.clone();
    g2.scale(-1.0);
    let zero = aggregate(&[g1.clone(), g2]).unwrap();
    assert_eq!(zero.max_abs(), 0.0);
    // random sets -> elementwise mean within 1e-15
    let mut g3 = g1.clone();
    g3.scale(0.31);
    let mean = aggregate(&[g1.clone(), g3.clone()]).unwrap();
    let (f1, f3, fm) = (g1.to_flat(), g3.to_flat(), mean.to_flat());
    for ((a, b), m) in f1.iter().zip(&f3).zip(&fm) {
        assert!((0.5 * (a + b) - m).abs() <= 1e-15);
    }
    // empty list -> error
    assert!(aggregate(&[]).is_err());
}

#[test]
fn global_update_zero_gradient_keeps_parameters() {
    let cfg = tiny_config();
    let model = initial_model(&cfg, 6).unwrap();
    let mut server = ServerState {
        global: model.clone(),
        lr_global: 1e-3,
        round: 0,
    };
    let zeros = GradientSet::zeros_like(&model);
    global_update(&mut server, &zeros, &[&model]).unwrap();
    let diff = GradientSet::from_model_diff(&model, &server.global, 1.0).unwrap();
    assert_eq!(diff.max_abs(), 0.0);
    assert_eq!(server.round, 1);
}

#[test]
fn fedavg_equivalence_one_round() {
    // plain SGD, 1 local epoch, lr_g = lr_l: the gradient-form global update
    // equals the parameter mean of the post-step client models
    let cfg = tiny_config();
    let clients = tiny_clients(&cfg, 7);
    let init = initial_model(&cfg, 7).unwrap();
    let h = hyper(1, "sgd");

    let mut models: Vec<_> = clients.iter().map(|_| init.clone()).collect();
    let mut grads = Vec::new();
    for (m, c) in models.iter_mut().zip(&clients) {
        let (g, _) = local_round(m, &c.train, &h, 7, 0).unwrap();
        grads.push(g);
    }
    let agg = aggregate(&grads).unwrap();
    let mut server = ServerState {
        global: init.clone(),
        lr_global: h.lr_global,
        round: 0,
    };
    let refs: Vec<&fedroute_nn::ModelWeights> = models.iter().collect();
    global_update(&mut server, &agg, &refs).unwrap();

    let fedavg = average_models(&refs).unwrap();
    let diff = GradientSet::from_model_diff(&fedavg, &server.global, 1.0).unwrap();
    assert!(diff.max_abs() < 1e-12, "fedavg residual {}", diff.max_abs());
}

#[test]
fn zero_global_lr_freezes_global_model() {
    let mut cfg = tiny_config();
    cfg.federation.lr_global = 0.0;
    cfg.federation.rounds = 2;
    let clients = tiny_clients(&cfg, 8);
    let init = initial_model(&cfg, 8).unwrap();
    let out = run_federation(
        &clients,
        init.clone(),
        &cfg.fed_hyper(),
        &cfg.personalization_settings(),
        8,
    )
    .unwrap();
    let diff = GradientSet::from_model_diff(&init, &out.server.global, 1.0).unwrap();
    assert_eq!(diff.max_abs(), 0.0, "trainable params must be frozen at lr_g = 0");
}

#[test]
fn zero_rounds_returns_initialization() {
    let cfg = tiny_config();
    let clients = tiny_clients(&cfg, 9);
    let init = initial_model(&cfg, 9).unwrap();
    let out = run_federation(
        &clients,
        init.clone(),
        &FedHyper { rounds: 0, ..hyper(0, "sgd") },
        &cfg.personalization_settings(),
        9,
    )
    .unwrap();
    assert_eq!(out.server.global.weights_checksum(), init.weights_checksum());
    assert!(out.trace.is_empty());
    for p in &out.personalized {
        assert_eq!(p.best.weights_checksum(), init.weights_checksum());
    }
}

#[test]
fn homogeneous_clients_stay_synchronized() {
    // identical data at every client: identical local gradients, so client
    // models and adapted models agree bitwise every round
    let cfg = tiny_config();
    let shared = build_client(&cfg, 0, 10).unwrap();
    let clients: Vec<ClientData> = (0..3)
        .map(|id| ClientData {
            id,
            train: shared.train.clone(),
            val: shared.val.clone(),
            test: shared.test.clone(),
            classes: shared.classes,
        })
        .collect();
    let init = initial_model(&cfg, 10).unwrap();
    let out = run_federation(
        &clients,
        init,
        &FedHyper { rounds: 2, ..hyper(2, "sgd") },
        &cfg.personalization_settings(),
        10,
    )
    .unwrap();
    let c0 = out.clients[0].model.weights_checksum();
    let p0 = out.personalized[0].current.weights.weights_checksum();
    for k in 1..3 {
        assert_eq!(out.clients[k].model.weights_checksum(), c0);
        assert_eq!(out.personalized[k].current.weights.weights_checksum(), p0);
    }
    assert_eq!(out.server.global.weights_checksum(), c0, "global step equals the common mixed step");
}

#[test]
fn federation_is_deterministic_across_thread_counts() {
    let cfg = tiny_config();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let clients = tiny_clients(&cfg, 11);
            let init = initial_model(&cfg, 11).unwrap();
            run_federation(
                &clients,
                init,
                &cfg.fed_hyper(),
                &cfg.personalization_settings(),
                11,
            )
            .unwrap()
        })
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.trace, b.trace, "loss traces must not depend on scheduling");
    assert_eq!(
        a.server.global.weights_checksum(),
        b.server.global.weights_checksum()
    );
    for (x, y) in a.personalized.iter().zip(&b.personalized) {
        assert_eq!(
            x.current.weights.weights_checksum(),
            y.current.weights.weights_checksum()
        );
    }
}

#[test]
fn diverging_loss_aborts_with_diagnostic() {
    let cfg = tiny_config();
    let clients = tiny_clients(&cfg, 12);
    let mut model = initial_model(&cfg, 12).unwrap();
    let mut h = hyper(1, "sgd");
    h.lr_local = 1e14; // blows the weights up within a couple of steps
    h.local_epochs = 4;
    let err = local_round(&mut model, &clients[0].train, &h, 12, 0);
    assert!(err.is_err());
}

#[test]
fn training_improves_validation_dice_at_small_scale() {
    let mut cfg = tiny_config();
    cfg.federation.rounds = 8;
    cfg.federation.lr_local = 3e-3;
    cfg.federation.lr_global = 3e-3;
    for s in cfg.data.inside_shifts.iter_mut() {
        s.n_samples = 24;
    }
    let clients = tiny_clients(&cfg, 13);
    let init = initial_model(&cfg, 13).unwrap();
    let untrained: f64 = clients
        .iter()
        .map(|c| {
            fedroute_core::metrics::evaluate_model(&init, &c.val, c.classes)
                .unwrap()
                .mean
        })
        .sum::<f64>()
        / clients.len() as f64;
    let out = run_federation(
        &clients,
        init,
        &cfg.fed_hyper(),
        &cfg.personalization_settings(),
        13,
    )
    .unwrap();
    let trained: f64 = clients
        .iter()
        .map(|c| {
            fedroute_core::metrics::evaluate_model(&out.server.global, &c.val, c.classes)
                .unwrap()
                .mean
        })
        .sum::<f64>()
        / clients.len() as f64;
    assert!(
        trained > untrained + 0.1,
        "expected a clear gain: untrained {untrained:.3}, trained {trained:.3}"
    );
}

#[test]
fn generated_roster_clients_are_heterogeneous() {
    let cfg = tiny_config();
    let a = generate_client(&cfg.data.inside_shifts[0], 2, 16, 77).unwrap();
    let b = generate_client(&cfg.data.inside_shifts[1], 2, 16, 77).unwrap();
    let mean = |ds: &fedroute_core::data::ClientDataset| {
        ds.samples.iter().map(|s| s.meta.prenorm_mean).sum::<f64>() / ds.samples.len() as f64
    };
    assert!((mean(&a) - mean(&b)).abs() > 0.05);
}
