//! Subcommand implementations behind the `sud` binary.
//!
//! Each command resolves its configuration, writes `<command>.toml` (the
//! resolved config) into the output directory, and refuses to overwrite its
//! own outputs unless forced.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::config::{DenoiserKind, ExperimentConfig, SweepAxis};
use crate::dataset::{generate, Dataset, Split};
use crate::error::{Error, Result};
use crate::nets::ModelParams;
use crate::seeds::derive_seed;
use crate::spatial::{filter_factors, filter_factors_csv, DenoiserSpec, LinearDenoiser};
use crate::temporal::AlphaCurve;
use crate::trainer::{
    denoiser_log_csv, evaluate, finish, log_csv, run, train, train_denoiser, EvalSummary, SupervisionMode, TrainData,
    TrainState,
};

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct GlobalOpts {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

/// Loads the config (or defaults) and applies command-line overrides.
pub fn resolve(opts: &GlobalOpts) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
        cfg.denoiser.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Data(format!("{} already exists (use --force)", path.display())));
    }
    Ok(())
}

fn write_resolved(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(format!("{command}.toml")), cfg.to_toml())?;
    Ok(())
}

fn write_plot(dir: &Path, name: &str, title: &str, x: &str, y: &[&str], group: Option<&str>) -> Result<()> {
    let mut s = format!("title = {title:?}\ncsv = \"{name}.csv\"\nx = {x:?}\ny = {y:?}\n");
    if let Some(g) = group {
        writeln!(s, "group_by = {g:?}").expect("string write");
    }
    fs::write(dir.join(format!("{name}.plot.toml")), s)?;
    Ok(())
}

fn read_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = Dataset::read(&cfg.data.dir)?;
    if ds.n_classes != cfg.reconstructor.n_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, network expects {}",
            ds.n_classes, cfg.reconstructor.n_classes
        )));
    }
    Ok(ds)
}

fn train_data(ds: &Dataset) -> Result<TrainData> {
    Ok(TrainData {
        labeled: ds.pairs(Split::Labeled)?,
        unlabeled: ds.images(Split::Unlabeled)?,
        val: ds.pairs(Split::Val)?,
    })
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<Dataset> {
    let ds = generate(&cfg.data.spec, cfg.data.seed)?;
    ds.write(&cfg.out, force)?;
    let mut resolved = cfg.clone();
    resolved.data.dir = cfg.out.clone();
    write_resolved(&resolved, "gen-data")?;
    info!("wrote {} examples to {}", ds.examples.len(), cfg.out.display());
    Ok(ds)
}

/// Trains the learned denoiser, or with `identity` only records an identity
/// denoiser section. Returns the final validation Dice when trained.
pub fn cmd_train_denoiser(cfg: &ExperimentConfig, force: bool, identity: bool) -> Result<Option<f64>> {
    let spec_path = cfg.out.join("denoiser.toml");
    guard(&spec_path, force)?;
    let mut section = cfg.denoiser.clone();
    let mut dice = None;
    if identity {
        section.kind = DenoiserKind::Identity;
    } else {
        let ds = read_dataset(cfg)?;
        let labels = ds.labels(Split::Denoiser)?;
        let val = ds.labels(Split::Val)?;
        let (params, log) = train_denoiser(&cfg.denoiser.train, &cfg.denoiser.net, &labels, &val, cfg.denoiser.seed)?;
        fs::create_dir_all(&cfg.out)?;
        let ckpt = cfg.out.join("denoiser.sudt");
        params.save(&ckpt)?;
        fs::write(cfg.out.join("denoiser_log.csv"), denoiser_log_csv(&log))?;
        write_plot(&cfg.out, "denoiser_log", "denoiser validation", "step", &["val_mean_dice"], None)?;
        section.kind = DenoiserKind::Learned;
        section.checkpoint = ckpt;
        dice = log.last().map(|r| r.val_mean_dice);
    }
    write_resolved(cfg, "train-denoiser")?;
    let text = toml::to_string(&toml::Table::from_iter([(
        "denoiser".to_string(),
        toml::Value::try_from(&section).map_err(|e| Error::Config(e.to_string()))?,
    )]))
    .map_err(|e| Error::Config(e.to_string()))?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(spec_path, text)?;
    Ok(dice)
}

fn denoiser_for(cfg: &ExperimentConfig) -> Result<DenoiserSpec> {
    if cfg.train.mode.needs_denoiser(cfg.train.beta) {
        cfg.denoiser.load_spec()
    } else {
        Ok(DenoiserSpec::Identity)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: ModelParams,
    pub state: TrainState,
}

/// Trains a reconstructor (optionally resuming a saved state), writing the
/// model, metric log, final state and periodic checkpoints. A diverged run
/// still leaves its log and a `status.txt` explaining where it stopped.
pub fn cmd_train(cfg: &ExperimentConfig, force: bool, resume: Option<&Path>) -> Result<TrainReport> {
    let model_path = cfg.out.join("model.sudt");
    if resume.is_none() {
        guard(&model_path, force)?;
        guard(&cfg.out.join("log.csv"), force)?;
    }
    let ds = read_dataset(cfg)?;
    let data = train_data(&ds)?;
    let denoiser = denoiser_for(cfg)?;
    let mut state = match resume {
        Some(p) => TrainState::load(p)?,
        None => TrainState::new(&cfg.train, &cfg.reconstructor)?,
    };
    if state.student.config != cfg.reconstructor {
        return Err(Error::Config("resumed state does not match the reconstructor config".into()));
    }
    write_resolved(cfg, "train")?;
    let out = cfg.out.clone();
    let mut save = |s: &TrainState| s.save(&out.join(format!("checkpoint-{:06}.sudt", s.step)));
    let result = run(&mut state, &cfg.train, &denoiser, &data, cfg.train.steps(), &mut save);
    fs::write(cfg.out.join("log.csv"), log_csv(cfg.train.mode, &state.log))?;
    write_plot(&cfg.out, "log", "validation", "step", &["val_mean_dice", "val_95hd"], None)?;
    if let Err(e) = result {
        let status = match &e {
            Error::Diverged { .. } => "diverged",
            _ => "failed",
        };
        fs::write(cfg.out.join("status.txt"), format!("{status}: {e}\n"))?;
        return Err(e);
    }
    fs::write(cfg.out.join("status.txt"), format!("completed {} steps\n", state.step))?;
    state.save(&cfg.out.join("state.sudt"))?;
    let outcome = finish(&cfg.train, state);
    outcome.model.save(&model_path)?;
    Ok(TrainReport {
        model: outcome.model,
        state: outcome.state,
    })
}

/// Per-image CSV: id, mean Dice, Dice per class (empty when the class is
/// absent from the reference), mean 95HD.
pub fn eval_images_csv(ids: &[String], s: &EvalSummary, n_classes: usize) -> String {
    let mut out = String::from("id,mean_dice");
    for j in 0..n_classes {
        write!(out, ",dice_class_{j}").expect("string write");
    }
    out.push_str(",hd95\n");
    for (id, m) in ids.iter().zip(&s.images) {
        write!(out, "{id},{:e}", m.dice).expect("string write");
        for d in &m.per_class {
            match d {
                Some(v) => write!(out, ",{v:e}"),
                None => write!(out, ","),
            }
            .expect("string write");
        }
        writeln!(out, ",{:e}", m.hd95).expect("string write");
    }
    out
}

pub fn eval_summary_csv(s: &EvalSummary) -> String {
    format!(
        "statistic,dice,hd95\nmean,{:e},{:e}\nmedian,{:e},{:e}\n",
        s.mean_dice, s.mean_hd95, s.median_dice, s.median_hd95
    )
}

pub fn cmd_eval(cfg: &ExperimentConfig, force: bool) -> Result<EvalSummary> {
    let images_path = cfg.out.join("eval_images.csv");
    guard(&images_path, force)?;
    let model = ModelParams::load(&cfg.model_path())?;
    let ds = Dataset::read(&cfg.data.dir)?;
    let ids: Vec<String> = ds.split(cfg.eval.split).map(|e| e.id.clone()).collect();
    let pairs = ds.pairs(cfg.eval.split)?;
    let summary = evaluate(&model, &pairs)?;
    write_resolved(cfg, "eval")?;
    fs::write(&images_path, eval_images_csv(&ids, &summary, model.config.n_classes))?;
    fs::write(cfg.out.join("eval_summary.csv"), eval_summary_csv(&summary))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub dice: f64,
    pub hd95: f64,
    /// Final validation Dice of the denoiser trained for this run, if any.
    pub denoiser_dice: f64,
    pub status: String,
}

pub const SWEEP_HEADER: &str = "value,seed,dice,95hd,denoiser_dice,status";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:e},{:e},{:e},{}",
            r.value,
            r.seed,
            r.dice,
            r.hd95,
            r.denoiser_dice,
            r.status.replace([',', '\n'], ";")
        )
        .expect("string write");
    }
    s
}

fn parse_number(axis: SweepAxis, v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("sweep value {v:?} is not a number for axis {}", axis.name())))
}

/// Applies one sweep value to a copy of the base config.
pub fn apply_sweep_value(base: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    match axis {
        SweepAxis::Beta => c.train.beta = parse_number(axis, value)?,
        SweepAxis::AlphaConst => c.train.schedule.alpha_curve = AlphaCurve::Constant(parse_number(axis, value)?),
        SweepAxis::LambdaMax => c.train.schedule.lambda_max = parse_number(axis, value)?,
        SweepAxis::Mode => c.train.mode = SupervisionMode::parse(value.trim())?,
        SweepAxis::DenoiserLabels => {
            let n = parse_number(axis, value)?;
            if n < 1.0 || n.fract() != 0.0 {
                return Err(Error::Config(format!("denoiser label count {value:?} must be a positive integer")));
            }
            c.denoiser.kind = DenoiserKind::Learned;
            c.denoiser.train.source_labels = n as usize;
        }
    }
    c.validate()?;
    Ok(c)
}

/// One sweep run entirely in memory: optional denoiser training, training,
/// then evaluation on the configured split.
pub fn sweep_run(cfg: &ExperimentConfig, axis: SweepAxis, ds: &Dataset) -> Result<(EvalSummary, f64)> {
    let data = train_data(ds)?;
    let mut denoiser_dice = f64::NAN;
    let denoiser = if axis == SweepAxis::DenoiserLabels {
        let (p, log) = train_denoiser(
            &cfg.denoiser.train,
            &cfg.denoiser.net,
            &ds.labels(Split::Denoiser)?,
            &ds.labels(Split::Val)?,
            cfg.denoiser.seed,
        )?;
        denoiser_dice = log.last().map_or(f64::NAN, |r| r.val_mean_dice);
        DenoiserSpec::Learned(Box::new(p))
    } else {
        denoiser_for(cfg)?
    };
    let out = train(&cfg.train, &cfg.reconstructor, &denoiser, &data)?;
    Ok((evaluate(&out.model, &ds.pairs(cfg.eval.split)?)?, denoiser_dice))
}

/// Runs every (value, seed) pair with matched seeds across values. Failed
/// runs are recorded and the sweep continues.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let s = &cfg.sweep;
    if s.values.is_empty() {
        return Err(Error::Config("sweep has no values".into()));
    }
    if s.seeds.is_empty() {
        return Err(Error::Config("sweep has no seeds".into()));
    }
    let runs: Vec<(String, u64, ExperimentConfig)> = s
        .values
        .iter()
        .flat_map(|v| s.seeds.iter().map(move |&seed| (v, seed)))
        .map(|(v, seed)| {
            let mut c = apply_sweep_value(cfg, s.axis, v)?;
            c.train.seed = seed;
            c.denoiser.seed = seed;
            if s.vary_data {
                c.data.seed = derive_seed(cfg.data.seed, &[seed]);
            }
            Ok((v.clone(), seed, c))
        })
        .collect::<Result<_>>()?;
    let shared = if s.vary_data { None } else { Some(read_dataset(cfg)?) };
    let one = |(value, seed, c): &(String, u64, ExperimentConfig)| -> SweepRow {
        let ds = match &shared {
            Some(d) => Ok(d.clone()),
            None => generate(&c.data.spec, c.data.seed),
        };
        let result = ds.and_then(|ds| sweep_run(c, s.axis, &ds));
        let (dice, hd95, denoiser_dice, status) = match result {
            Ok((e, dd)) => (e.mean_dice, e.mean_hd95, dd, "ok".to_string()),
            Err(e @ Error::Diverged { .. }) => (f64::NAN, f64::NAN, f64::NAN, format!("diverged: {e}")),
            Err(e) => (f64::NAN, f64::NAN, f64::NAN, format!("error: {e}")),
        };
        if status != "ok" {
            warn!("sweep run {value} seed {seed}: {status}");
        }
        info!("sweep {}={value} seed {seed}: dice {dice:.4}", s.axis.name());
        SweepRow {
            value: value.clone(),
            seed: *seed,
            dice,
            hd95,
            denoiser_dice,
            status,
        }
    };
    if !s.parallel {
        return Ok(runs.iter().map(one).collect());
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(runs.len());
    let mut rows: Vec<Option<SweepRow>> = vec![None; runs.len()];
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let runs = &runs;
                let one = &one;
                scope.spawn(move || {
                    (t..runs.len())
                        .step_by(threads)
                        .map(|i| (i, one(&runs[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                rows[i] = Some(r);
            }
        }
    });
    Ok(rows.into_iter().map(|r| r.expect("every run reported")).collect())
}

pub fn cmd_sweep(cfg: &ExperimentConfig, force: bool) -> Result<Vec<SweepRow>> {
    let path = cfg.out.join("sweep.csv");
    guard(&path, force)?;
    let rows = run_sweep(cfg)?;
    write_resolved(cfg, "sweep")?;
    fs::write(&path, sweep_csv(&rows))?;
    write_plot(&cfg.out, "sweep", cfg.sweep.axis.name(), "value", &["dice", "95hd"], Some("seed"))?;
    Ok(rows)
}

/// Filter factors of the ring smoother for every configured β.
pub fn spectrum_csv(cfg: &ExperimentConfig) -> Result<String> {
    let sp = &cfg.spectrum;
    if sp.betas.is_empty() {
        return Err(Error::Config("spectrum needs at least one beta".into()));
    }
    if sp.taps == 0 || sp.taps > sp.size || sp.sigma <= 0.0 {
        return Err(Error::Config(format!(
            "ring smoother needs 0 < taps <= size and sigma > 0 (taps {}, size {}, sigma {})",
            sp.taps, sp.size, sp.sigma
        )));
    }
    let a = LinearDenoiser::gaussian_ring(sp.size, sp.taps, sp.sigma);
    let sets = sp.betas.iter().map(|&b| filter_factors(&a, b)).collect::<Result<Vec<_>>>()?;
    Ok(filter_factors_csv(&sets))
}

pub fn cmd_spectrum(cfg: &ExperimentConfig, force: bool) -> Result<String> {
    let path = cfg.out.join("spectrum.csv");
    guard(&path, force)?;
    let csv = spectrum_csv(cfg)?;
    write_resolved(cfg, "spectrum")?;
    fs::write(&path, &csv)?;
    write_plot(&cfg.out, "spectrum", "filter factors", "lambda", &["direct", "proximal"], Some("beta"))?;
    Ok(csv)
}
