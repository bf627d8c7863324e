//! Command implementations and on-disk artifact layout.
//!
//! A training run directory contains a frozen copy of the resolved config
//! plus one subdirectory per master seed with the round trace and
//! checkpoints, so any artifact is reproducible from its directory alone.
//! Nothing written here includes timestamps or machine state; rerunning a
//! command with the same config and seed reproduces every file byte for
//! byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedroute_nn::checkpoint::{load_model, save_model};
use fedroute_nn::ModelWeights;

use crate::data::{ClientDataset, SegmentationSample};
use crate::error::{Result, SimError};
use crate::experiment::{
    build_client, initial_model, run_outside_seed, run_train_seed,
    ExperimentConfig, InsideClientEval, TrainRun,
};
use crate::fed::{run_federation_with_hook, train_single_site, RoundRow};
use crate::metrics::DiceScore;
use crate::outside::StrategyOutcome;

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// `(group, method, class)` mean/std over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggRow {
    /// Client id for inside reports, strategy name's column for outside.
    pub group: String,
    pub method: String,
    /// 1-based foreground class label.
    pub class: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedInsideReport {
    pub master: u64,
    pub evals: Vec<InsideClientEval>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InsideReport {
    pub insiders: Vec<usize>,
    pub per_seed: Vec<SeedInsideReport>,
    pub aggregate: Vec<AggRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyDice {
    pub strategy: String,
    pub dice: DiceScore,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutsideReport {
    pub master: u64,
    pub strategies: Vec<StrategyDice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutsideReport {
    pub holdout: usize,
    pub per_seed: Vec<SeedOutsideReport>,
    pub aggregate: Vec<AggRow>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate_inside(per_seed: &[SeedInsideReport]) -> Vec<AggRow> {
    let mut rows = Vec::new();
    if per_seed.is_empty() {
        return rows;
    }
    let n_clients = per_seed[0].evals.len();
    for ci in 0..n_clients {
        let client_id = per_seed[0].evals[ci].client_id;
        let n_classes = per_seed[0].evals[ci].personalized.per_class.len();
        let mut methods: Vec<(&str, Box<dyn Fn(&InsideClientEval) -> Option<&DiceScore>>)> = vec![
            ("personalized", Box::new(|e| Some(&e.personalized))),
            ("global", Box::new(|e| Some(&e.global))),
        ];
        if per_seed[0].evals[ci].single_site.is_some() {
            methods.push(("single-site", Box::new(|e| e.single_site.as_ref())));
        }
        for (name, pick) in &methods {
            for class in 0..n_classes {
                let vals: Vec<f64> = per_seed
                    .iter()
                    .filter_map(|s| pick(&s.evals[ci]).map(|d| d.per_class[class]))
                    .collect();
                let (mean, std) = mean_std(&vals);
                rows.push(AggRow {
                    group: format!("client{client_id}"),
                    method: name.to_string(),
                    class: class + 1,
                    mean,
                    std,
                });
            }
        }
    }
    rows
}

fn aggregate_outside(per_seed: &[SeedOutsideReport]) -> Vec<AggRow> {
    let mut rows = Vec::new();
    if per_seed.is_empty() {
        return rows;
    }
    for (si, strat) in per_seed[0].strategies.iter().enumerate() {
        for class in 0..strat.dice.per_class.len() {
            let vals: Vec<f64> = per_seed
                .iter()
                .map(|s| s.strategies[si].dice.per_class[class])
                .collect();
            let (mean, std) = mean_std(&vals);
            rows.push(AggRow {
                group: "outside".into(),
                method: strat.strategy.clone(),
                class: class + 1,
                mean,
                std,
            });
        }
    }
    rows
}

// ---------------------------------------------------------------------------
// cmd_train
// ---------------------------------------------------------------------------

pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub report: InsideReport,
}

fn write_round_trace(path: &Path, rows: &[RoundRow]) -> Result<()> {
    let mut csv = String::from("round,client_id,train_loss,val_dice\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.round, r.client_id, r.train_loss, r.val_dice
        ));
    }
    fs::write(path, csv)?;
    Ok(())
}

fn write_inside_dice_csv(path: &Path, report: &InsideReport) -> Result<()> {
    let mut csv = String::from("seed,client_id,method,class,dice\n");
    for seed_report in &report.per_seed {
        for eval in &seed_report.evals {
            let mut methods: Vec<(&str, &DiceScore)> = vec![
                ("personalized", &eval.personalized),
                ("global", &eval.global),
            ];
            if let Some(ss) = &eval.single_site {
                methods.push(("single-site", ss));
            }
            for (name, score) in methods {
                for (class, dice) in score.per_class.iter().enumerate() {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        seed_report.master,
                        eval.client_id,
                        name,
                        class + 1,
                        dice
                    ));
                }
            }
        }
    }
    fs::write(path, csv)?;
    Ok(())
}

/// Trains the federation for every master seed, writing traces, checkpoints
/// and the inside Dice report.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let insiders: Vec<usize> = (0..cfg.inside_client_count()).collect();
    let mut per_seed = Vec::new();
    for master in cfg.seeds.masters() {
        let run = train_one_seed_with_artifacts(cfg, &insiders, master, out_dir)?;
        per_seed.push(SeedInsideReport {
            master,
            evals: run.inside_eval,
        });
    }
    let report = InsideReport {
        insiders,
        aggregate: aggregate_inside(&per_seed),
        per_seed,
    };
    fs::write(
        out_dir.join("inside_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_inside_dice_csv(&out_dir.join("inside_dice.csv"), &report)?;
    Ok(TrainArtifacts {
        out_dir: out_dir.to_path_buf(),
        report,
    })
}

/// One seed of cmd_train: run, then write `seed_<master>/` artifacts.
fn train_one_seed_with_artifacts(
    cfg: &ExperimentConfig,
    insiders: &[usize],
    master: u64,
    out_dir: &Path,
) -> Result<TrainRun> {
    let seed_dir = out_dir.join(format!("seed_{master:04}"));
    let ckpt_dir = seed_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;

    let clients: Vec<_> = insiders
        .iter()
        .map(|&k| build_client(cfg, k, master))
        .collect::<Result<_>>()?;
    let init = initial_model(cfg, master)?;
    let every = cfg.federation.checkpoint_every;
    let outcome = run_federation_with_hook(
        &clients,
        init.clone(),
        &cfg.fed_hyper(),
        &cfg.personalization_settings(),
        master,
        |round, server| {
            if every > 0 && (round + 1) % every == 0 {
                save_model(&server.global, &ckpt_dir, &format!("global_round_{:04}", round + 1))
                    .map_err(SimError::Engine)?;
            }
            Ok(())
        },
    )?;

    save_model(&outcome.server.global, &ckpt_dir, "global").map_err(SimError::Engine)?;
    for (i, track) in outcome.personalized.iter().enumerate() {
        let stem = format!("pers_{}_{}", clients[i].id, track.best_round);
        save_model(&track.best, &ckpt_dir, &stem).map_err(SimError::Engine)?;
    }
    write_round_trace(&seed_dir.join("round_trace.csv"), &outcome.trace)?;

    let mut inside_eval = Vec::with_capacity(clients.len());
    for (i, data) in clients.iter().enumerate() {
        let track = &outcome.personalized[i];
        let personalized = crate::metrics::evaluate_model(&track.best, &data.test, data.classes)?;
        let global =
            crate::metrics::evaluate_model(&outcome.server.global, &data.test, data.classes)?;
        let single_site = if cfg.federation.include_single_site {
            let (best, _) = train_single_site(data, init.clone(), &cfg.fed_hyper(), master)?;
            save_model(&best, &ckpt_dir, &format!("single_site_{}", data.id))
                .map_err(SimError::Engine)?;
            Some(crate::metrics::evaluate_model(&best, &data.test, data.classes)?)
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

// ---------------------------------------------------------------------------
// cmd_adapt
// ---------------------------------------------------------------------------

pub struct AdaptArtifacts {
    pub out_dir: PathBuf,
    pub report: OutsideReport,
}

/// Loaded member checkpoints of one training seed.
pub struct SeedCheckpoints {
    pub personalized: Vec<ModelWeights>,
    pub global: ModelWeights,
}

/// Loads the global and every insider's personalized checkpoint from a
/// `cmd_train` seed directory, verifying architecture agreement. Fails
/// without side effects if anything is missing.
pub fn load_seed_checkpoints(seed_dir: &Path, insiders: &[usize]) -> Result<SeedCheckpoints> {
    let ckpt_dir = seed_dir.join("checkpoints");
    let global = load_model(&ckpt_dir, "global").map_err(|e| {
        SimError::InvalidInput(format!("missing global checkpoint in {}: {e}", ckpt_dir.display()))
    })?;
    let mut personalized = Vec::with_capacity(insiders.len());
    for &k in insiders {
        let prefix = format!("pers_{k}_");
        let mut stems: Vec<String> = fs::read_dir(&ckpt_dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.strip_suffix(".json")
                    .filter(|stem| stem.starts_with(&prefix))
                    .map(|stem| stem.to_string())
            })
            .collect();
        stems.sort();
        let stem = stems.pop().ok_or_else(|| {
            SimError::InvalidInput(format!(
                "missing personalized checkpoint `{prefix}*` for client {k} in {}",
                ckpt_dir.display()
            ))
        })?;
        let model = load_model(&ckpt_dir, &stem).map_err(SimError::Engine)?;
        model.check_same_arch(&global).map_err(SimError::Engine)?;
        personalized.push(model);
    }
    Ok(SeedCheckpoints { personalized, global })
}

fn write_pgm_mask(path: &Path, mask: &[u8], size: usize, classes: usize) -> Result<()> {
    let scale = 255 / (classes as u8 - 1);
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend(mask.iter().map(|v| v * scale));
    fs::write(path, out)?;
    Ok(())
}

/// Adapts on the holdout client using checkpoints from a `cmd_train` run
/// directory and writes the routing report, loss trace, predictions, and the
/// outside Dice report. Data and model settings come from the run's frozen
/// config; routing settings come from `cfg`.
pub fn cmd_adapt(
    cfg: &ExperimentConfig,
    checkpoint_dir: &Path,
    outside_client: Option<usize>,
    out_dir: &Path,
) -> Result<AdaptArtifacts> {
    let frozen_text = fs::read_to_string(checkpoint_dir.join("config.json")).map_err(|e| {
        SimError::InvalidInput(format!(
            "cannot read frozen config in {}: {e}",
            checkpoint_dir.display()
        ))
    })?;
    let mut run_cfg = ExperimentConfig::from_json(&frozen_text)?;
    run_cfg.routing = cfg.routing.clone();
    run_cfg.seeds = cfg.seeds.clone();
    let holdout = outside_client.unwrap_or_else(|| run_cfg.outside_client_index());
    run_cfg.roster_shift(holdout)?;
    let insiders: Vec<usize> = (0..run_cfg.inside_client_count()).collect();

    // load every seed's checkpoints before writing anything
    let masters = run_cfg.seeds.masters();
    let mut loaded = Vec::with_capacity(masters.len());
    for &master in &masters {
        let seed_dir = checkpoint_dir.join(format!("seed_{master:04}"));
        loaded.push(load_seed_checkpoints(&seed_dir, &insiders)?);
    }

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(&run_cfg)?)?;
    let mut per_seed = Vec::new();
    for (&master, ckpt) in masters.iter().zip(&loaded) {
        let outcomes =
            run_outside_seed(&run_cfg, &ckpt.personalized, &ckpt.global, holdout, master)?;
        let seed_dir = out_dir.join(format!("seed_{master:04}"));
        fs::create_dir_all(&seed_dir)?;
        write_adapt_artifacts(&run_cfg, &outcomes, &seed_dir)?;
        per_seed.push(SeedOutsideReport {
            master,
            strategies: outcomes
                .iter()
                .map(|o| StrategyDice {
                    strategy: o.name.to_string(),
                    dice: o.dice.clone(),
                    best_epoch: o.adapt.as_ref().map(|a| a.best_epoch),
                })
                .collect(),
        });
    }
    let report = OutsideReport {
        holdout,
        aggregate: aggregate_outside(&per_seed),
        per_seed,
    };
    fs::write(
        out_dir.join("outside_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut csv = String::from("seed,strategy,class,dice\n");
    for s in &report.per_seed {
        for strat in &s.strategies {
            for (class, dice) in strat.dice.per_class.iter().enumerate() {
                csv.push_str(&format!("{},{},{},{}\n", s.master, strat.strategy, class + 1, dice));
            }
        }
    }
    fs::write(out_dir.join("outside_dice.csv"), csv)?;
    Ok(AdaptArtifacts {
        out_dir: out_dir.to_path_buf(),
        report,
    })
}

fn write_adapt_artifacts(
    cfg: &ExperimentConfig,
    outcomes: &[StrategyOutcome],
    seed_dir: &Path,
) -> Result<()> {
    let routed = outcomes.iter().find_map(|o| o.adapt.as_ref());
    if let Some(adapt) = routed {
        let mut loss_csv = String::from("epoch,mean_loss\n");
        for (e, l) in adapt.loss_trace.iter().enumerate() {
            loss_csv.push_str(&format!("{e},{l}\n"));
        }
        fs::write(seed_dir.join("adapt_loss.csv"), loss_csv)?;

        let mut routing_csv = String::from("epoch,layer,member,mean,std\n");
        for (e, stats) in adapt.routing_stats.iter().enumerate() {
            for (layer, member, mean, std) in &stats.rows {
                routing_csv.push_str(&format!("{e},{layer},{member},{mean},{std}\n"));
            }
        }
        fs::write(seed_dir.join("routing_report.csv"), routing_csv)?;

        let pred_dir = seed_dir.join("predictions");
        fs::create_dir_all(&pred_dir)?;
        for (i, mask) in adapt.predictions.iter().enumerate() {
            write_pgm_mask(
                &pred_dir.join(format!("pred_{i:03}.pgm")),
                mask,
                cfg.data.image_size,
                cfg.data.classes,
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// leave-one-client-out protocol (library-level; exercised by tests)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooCell {
    pub holdout: usize,
    pub inside: InsideReport,
    pub outside: OutsideReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooReport {
    pub cells: Vec<LooCell>,
}

/// For each roster client (inside shifts plus the outside shift): train the
/// federation on the rest, evaluate insiders, run every outside strategy on
/// the holdout. Aggregates over the configured seeds.
pub fn leave_one_out(cfg: &ExperimentConfig) -> Result<LooReport> {
    cfg.validate()?;
    let roster = cfg.inside_client_count() + 1;
    if roster < 3 {
        return Err(SimError::InvalidInput(format!(
            "leave-one-out needs at least 3 roster clients, got {roster}"
        )));
    }
    let mut cells = Vec::with_capacity(roster);
    for holdout in 0..roster {
        let insiders: Vec<usize> = (0..roster).filter(|&k| k != holdout).collect();
        let mut inside_seeds = Vec::new();
        let mut outside_seeds = Vec::new();
        for master in cfg.seeds.masters() {
            let run = run_train_seed(cfg, &insiders, master)?;
            let personalized: Vec<ModelWeights> = run
                .outcome
                .personalized
                .iter()
                .map(|t| t.best.clone())
                .collect();
            let outcomes =
                run_outside_seed(cfg, &personalized, &run.outcome.server.global, holdout, master)?;
            inside_seeds.push(SeedInsideReport {
                master,
                evals: run.inside_eval,
            });
            outside_seeds.push(SeedOutsideReport {
                master,
                strategies: outcomes
                    .iter()
                    .map(|o| StrategyDice {
                        strategy: o.name.to_string(),
                        dice: o.dice.clone(),
                        best_epoch: o.adapt.as_ref().map(|a| a.best_epoch),
                    })
                    .collect(),
            });
        }
        cells.push(LooCell {
            holdout,
            inside: InsideReport {
                insiders,
                aggregate: aggregate_inside(&inside_seeds),
                per_seed: inside_seeds,
            },
            outside: OutsideReport {
                holdout,
                aggregate: aggregate_outside(&outside_seeds),
                per_seed: outside_seeds,
            },
        });
    }
    Ok(LooReport { cells })
}

// ---------------------------------------------------------------------------
// cmd_ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Tau,
    LocalEpochs,
    Members,
    WindowRadius,
    Beta,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tau" => Ok(SweepParam::Tau),
            "local_epochs" => Ok(SweepParam::LocalEpochs),
            "members" => Ok(SweepParam::Members),
            "d" | "window_radius" => Ok(SweepParam::WindowRadius),
            "beta" => Ok(SweepParam::Beta),
            other => Err(SimError::config(
                "sweep",
                format!("unknown sweep parameter `{other}` (tau, local_epochs, members, d, beta)"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::LocalEpochs => "local_epochs",
            SweepParam::Members => "members",
            SweepParam::WindowRadius => "d",
            SweepParam::Beta => "beta",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub inside_personalized_mean: f64,
    pub inside_global_mean: f64,
    pub outside_global: f64,
    pub outside_average: f64,
    pub outside_ensemble: f64,
    pub outside_routed: f64,
}

/// One experiment per grid point with shared seeds; emits a consolidated
/// CSV for plotting.
pub fn cmd_ablate(cfg: &ExperimentConfig, sweep: &SweepSpec, out_dir: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if sweep.values.is_empty() {
        return Err(SimError::config("sweep", "empty value grid"));
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut rows = Vec::new();
    for &value in &sweep.values {
        let mut point = cfg.clone();
        let mut insiders: Vec<usize> = (0..cfg.inside_client_count()).collect();
        match sweep.param {
            SweepParam::Tau => point.personalization.tau = value,
            SweepParam::LocalEpochs => point.federation.local_epochs = value as usize,
            SweepParam::WindowRadius => point.routing.window_radius = value as usize,
            SweepParam::Beta => point.routing.beta = value,
            SweepParam::Members => {
                let m = value as usize;
                if m == 0 || m > cfg.inside_client_count() {
                    return Err(SimError::config(
                        "sweep",
                        format!("member count {m} outside 1..={}", cfg.inside_client_count()),
                    ));
                }
                insiders.truncate(m);
            }
        }
        point.validate()?;
        let holdout = cfg.outside_client_index();
        for master in cfg.seeds.masters() {
            let run = run_train_seed(&point, &insiders, master)?;
            let personalized: Vec<ModelWeights> =
                run.outcome.personalized.iter().map(|t| t.best.clone()).collect();
            let outcomes = run_outside_seed(
                &point,
                &personalized,
                &run.outcome.server.global,
                holdout,
                master,
            )?;
            let mean_of = |pick: fn(&InsideClientEval) -> &DiceScore| {
                run.inside_eval.iter().map(|e| pick(e).mean).sum::<f64>()
                    / run.inside_eval.len() as f64
            };
            let strat = |name: &str| {
                outcomes
                    .iter()
                    .find(|o| o.name == name)
                    .map(|o| o.dice.mean)
                    .unwrap_or(f64::NAN)
            };
            rows.push(SweepRow {
                param: sweep.param.name().to_string(),
                value,
                seed: master,
                inside_personalized_mean: mean_of(|e| &e.personalized),
                inside_global_mean: mean_of(|e| &e.global),
                outside_global: strat("global"),
                outside_average: strat("average"),
                outside_ensemble: strat("ensemble"),
                outside_routed: strat("routed"),
            });
        }
    }
    let mut csv = String::from(
        "param,value,seed,inside_personalized_mean,inside_global_mean,outside_global,outside_average,outside_ensemble,outside_routed\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.param,
            r.value,
            r.seed,
            r.inside_personalized_mean,
            r.inside_global_mean,
            r.outside_global,
            r.outside_average,
            r.outside_ensemble,
            r.outside_routed
        ));
    }
    fs::write(out_dir.join(format!("sweep_{}.csv", sweep.param.name())), csv)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// misc
// ---------------------------------------------------------------------------

/// Exports every roster client's full dataset as PGM files (debug surface).
pub fn export_datasets(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let master = cfg.seeds.master;
    for k in 0..=cfg.inside_client_count() {
        let shift = cfg.roster_shift(k)?;
        let ds: ClientDataset = crate::data::generate_client(
            shift,
            cfg.data.classes,
            cfg.data.image_size,
            fedroute_nn::rng::derive_seed(master, "data", &[k as u64]),
        )?;
        crate::data::export_client(&ds, out_dir, &format!("client{k}"))?;
    }
    Ok(())
}

/// Images of a sample set (drops labels; used where label blindness is
/// enforced by construction).
pub fn images_of(samples: &[SegmentationSample]) -> Vec<fedroute_nn::Tensor4D> {
    samples.iter().map(|s| s.image.clone()).collect()
}
