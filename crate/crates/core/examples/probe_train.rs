use fedroute_core::experiment::*;
use fedroute_core::harness::*;
use std::path::Path;

fn main() {
    let mut cfg = ExperimentConfig::default_desk_scale();
    cfg.federation.optimizer = "adam".into();
    cfg.personalization.variant = "ema-snapshot".into();
    let out = Path::new("/tmp/probe_run");
    let holdout = cfg.outside_client_index();
    for (noise, scale) in [(0.30, -0.9), (0.25, -0.95), (0.22, -1.05)] {
        for (batch, lr) in [(4, 3e-3), (8, 1e-2)] {
            let mut c2 = cfg.clone();
            c2.data.outside_shift.noise_sigma = noise;
            c2.data.outside_shift.intensity_scale = scale;
            c2.routing.adapt_batch = batch;
            c2.routing.adapt_lr = lr;
            let mut means = vec![0.0f64; 4];
            let mut wins = [0; 3];
            for master in cfg.seeds.masters() {
                let ck = load_seed_checkpoints(&out.join(format!("seed_{master:04}")), &[0,1,2,3]).unwrap();
                let outcomes = run_outside_seed(&c2, &ck.personalized, &ck.global, holdout, master).unwrap();
                let routed = outcomes[3].dice.mean;
                for i in 0..3 { if routed >= outcomes[i].dice.mean { wins[i] += 1; } }
                for (i, o) in outcomes.iter().enumerate() { means[i] += o.dice.mean / 3.0; }
            }
            println!("noise={noise} scale={scale} batch={batch} lr={lr:.0e}: g={:.3} a={:.3} e={:.3} ROUTED={:.3} wins(g,a,e)={:?}",
                means[0], means[1], means[2], means[3], wins);
        }
    }
}
