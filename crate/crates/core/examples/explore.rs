//! Short comparison of supervision modes on the synthetic task.
//!
//! `cargo run --release --example explore -- STEPS SEED [gauss|learned|none] [modes...]`

use std::time::Instant;

use sud::dataset::{generate, DatasetSpec, Split};
use sud::nets::NetConfig;
use sud::spatial::DenoiserSpec;
use sud::trainer::{evaluate, train, train_denoiser, DenoiserTrainConfig, SupervisionMode, TrainConfig, TrainData};

fn modes_only_denoiser() -> bool {
    std::env::var("DONLY").is_ok()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let den = args.get(2).map(String::as_str).unwrap_or("gauss");
    let modes: Vec<SupervisionMode> = if args.len() > 3 {
        args[3..].iter().map(|m| SupervisionMode::parse(m).unwrap()).collect()
    } else {
        vec![SupervisionMode::SupervisedOnly, SupervisionMode::TemporalEnsembling, SupervisionMode::SudStored]
    };
    let classes = 3;
    let ds = generate(&DatasetSpec::desk(classes), 1000 + seed).unwrap();
    let data = TrainData {
        labeled: ds.pairs(Split::Labeled).unwrap(),
        unlabeled: ds.images(Split::Unlabeled).unwrap(),
        val: ds.pairs(Split::Val).unwrap(),
    };
    let test = ds.pairs(Split::Test).unwrap();
    let mut net = NetConfig::reconstructor(1, classes);
    net.base_features = 4;
    net.max_features = 32;
    let denoiser = match den {
        "learned" => {
            let t0 = Instant::now();
            let mut cfg = DenoiserTrainConfig::default();
            let env = |k: &str| std::env::var(k).ok().map(|v| v.parse::<f64>().unwrap());
            if let Some(v) = env("DSTEPS") {
                cfg.steps = v as usize;
            }
            if let Some(v) = env("DLR") {
                cfg.optimizer.learning_rate = v;
            }
            if let Some(v) = env("DSIGMA") {
                cfg.corruption.sigma.1 = v;
            }
            let mut dnet = NetConfig::denoiser(classes);
            dnet.base_features = env("DBASE").map_or(4, |v| v as usize);
            dnet.max_features = 8 * dnet.base_features;
            if modes_only_denoiser() {
                let val = sud::synth::make_denoiser_dataset(
                    &ds.labels(Split::Val).unwrap(),
                    &cfg.corruption,
                    cfg.val_examples,
                    &mut sud::seeds::derive_rng(seed, &[1]),
                )
                .unwrap();
                let raw: f64 = val
                    .iter()
                    .map(|(z, y)| sud::losses::mean_dice(&z.argmax(), y, classes).unwrap().mean)
                    .sum::<f64>()
                    / val.len() as f64;
                println!("argmax of corrupted input: {raw:.4}");
                if std::env::var("NOAUG").is_ok() {
                    cfg.label_augment = sud::synth::AugmentOptions::none();
                }
                let (_, log) = train_denoiser(&cfg, &dnet, &ds.labels(Split::Denoiser).unwrap(), &ds.labels(Split::Val).unwrap(), seed).unwrap();
                for r in log {
                    println!("{r:?}");
                }
                println!("{:.0}s", t0.elapsed().as_secs_f64());
                return;
            }
            let (p, log) = train_denoiser(
                &cfg,
                &dnet,
                &ds.labels(Split::Denoiser).unwrap(),
                &ds.labels(Split::Val).unwrap(),
                seed,
            )
            .unwrap();
            eprintln!("denoiser {:?} in {:.0}s", log.last(), t0.elapsed().as_secs_f64());
            DenoiserSpec::Learned(Box::new(p))
        }
        "none" => DenoiserSpec::Identity,
        _ => DenoiserSpec::Gaussian { sigma: 1.5, radius: 3 },
    };
    for mode in modes {
        let t0 = Instant::now();
        let mut cfg = TrainConfig::new(mode, steps);
        cfg.seed = seed;
        if let Ok(lr) = std::env::var("LR") {
            cfg.optimizer.learning_rate = lr.parse().unwrap();
        }
        if let Ok(b) = std::env::var("BETA") {
            cfg.beta = b.parse().unwrap();
        }
        if let Ok(l) = std::env::var("LMAX") {
            cfg.schedule.lambda_max = l.parse().unwrap();
        }
        let out = train(&cfg, &net, &denoiser, &data).unwrap();
        let s = evaluate(&out.model, &test).unwrap();
        let last = out.state.log.last().unwrap();
        println!(
            "{:<22} test dice mean {:.4} median {:.4} hd95 {:.2}  last val {:.4}  ({:.0}s)",
            mode.name(),
            s.mean_dice,
            s.median_dice,
            s.mean_hd95,
            last.val_mean_dice,
            t0.elapsed().as_secs_f64()
        );
        if std::env::var("VERBOSE").is_ok() {
            for r in &out.state.log {
                eprintln!("  {} a={:.3} l={:.3} loss={:.4} val={:.4}", r.step, r.alpha, r.lambda, r.train_loss, r.val_mean_dice);
            }
        }
    }
}
