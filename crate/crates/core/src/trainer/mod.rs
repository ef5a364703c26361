//! The SUD training loop and its special cases (RED, Π-model, temporal
//! ensembling, mean teacher).

mod adam;
mod denoiser;
mod targets;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use denoiser::{denoiser_log_csv, evaluate_denoiser, train_denoiser, DenoiserLogRow, DenoiserTrainConfig, DENOISER_LOG_HEADER};
pub use targets::{project_simplex, target_update_blend, target_update_exponential, target_update_projected, ExpUpdate};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{loss_graph, mean_dice, mean_hausdorff95, DiceOptions, LabelMap, LossKind, ProbField};
use crate::nets::{self, build_reconstructor, forward_graph, ModelParams, NetConfig};
use crate::seeds::derive_rng;
use crate::spatial::{apply_denoiser, DenoiserSpec};
use crate::synth::{augment, augment_photometric, AugmentOptions};
use crate::temporal::{alpha_bar, schedule_at, teacher_update, Schedule, SoftTargetStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionMode {
    SupervisedOnly,
    /// Pure spatial denoising of the current prediction (`α = β = 1`).
    Red,
    /// Current prediction as target (`α = 1`, `β = 0`).
    PiModel,
    /// Stored EMA of predictions (`β = 0`).
    TemporalEnsembling,
    /// EMA of weights (`β = 0`).
    MeanTeacher,
    SudStored,
    SudTeacher,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 7] = [
        SupervisionMode::SupervisedOnly,
        SupervisionMode::Red,
        SupervisionMode::PiModel,
        SupervisionMode::TemporalEnsembling,
        SupervisionMode::MeanTeacher,
        SupervisionMode::SudStored,
        SupervisionMode::SudTeacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SupervisionMode::SupervisedOnly => "supervised-only",
            SupervisionMode::Red => "red",
            SupervisionMode::PiModel => "pi-model",
            SupervisionMode::TemporalEnsembling => "temporal-ensembling",
            SupervisionMode::MeanTeacher => "mean-teacher",
            SupervisionMode::SudStored => "sud-stored",
            SupervisionMode::SudTeacher => "sud-teacher",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown supervision mode {s:?}")))
    }

    pub fn uses_unlabeled(self) -> bool {
        self != SupervisionMode::SupervisedOnly
    }

    pub fn uses_store(self) -> bool {
        matches!(self, SupervisionMode::TemporalEnsembling | SupervisionMode::SudStored)
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, SupervisionMode::MeanTeacher | SupervisionMode::SudTeacher)
    }

    /// `(α, β)` after the mode's forced values are applied.
    pub fn effective(self, alpha: f64, beta: f64) -> (f64, f64) {
        match self {
            SupervisionMode::Red => (1.0, 1.0),
            SupervisionMode::PiModel => (1.0, 0.0),
            SupervisionMode::TemporalEnsembling | SupervisionMode::MeanTeacher => (alpha, 0.0),
            _ => (alpha, beta),
        }
    }

    pub fn needs_denoiser(self, beta: f64) -> bool {
        match self {
            SupervisionMode::Red => true,
            SupervisionMode::SudStored | SupervisionMode::SudTeacher => beta > 0.0,
            _ => false,
        }
    }
}

/// How stored soft targets are updated in `sud-stored` mode; the other
/// modes always use the convex blend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetStep {
    ConvexBlend,
    ProjectedDescent,
    ExponentialDescent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub supervised: LossKind,
    /// Loss against soft targets; `None` uses the supervised loss.
    pub unsupervised: Option<LossKind>,
    pub dice: DiceOptions,
}

impl Objective {
    pub fn unsupervised_kind(&self) -> LossKind {
        self.unsupervised.unwrap_or(self.supervised)
    }
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            supervised: LossKind::Dice,
            unsupervised: None,
            dice: DiceOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: SupervisionMode,
    pub target_step: TargetStep,
    pub beta: f64,
    pub schedule: Schedule,
    pub objective: Objective,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub augment: AugmentOptions,
    /// Seed unseen soft targets with the first prediction instead of zero.
    pub init_targets_from_prediction: bool,
    /// Separate self-supervised and supervised weight updates per step.
    pub two_pass: bool,
    /// Steps between log rows (and validations); 0 means one epoch.
    pub log_every: usize,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub divergence_threshold: f64,
}

impl TrainConfig {
    /// Defaults: `β = 0.05`, `λ_max = 4`.
    pub fn new(mode: SupervisionMode, steps: usize) -> Self {
        Self {
            mode,
            target_step: TargetStep::ConvexBlend,
            beta: 0.05,
            schedule: Schedule::linear(steps, 4.0),
            objective: Objective::default(),
            optimizer: AdamConfig::default(),
            seed: 0,
            augment: AugmentOptions::desk(),
            init_targets_from_prediction: false,
            two_pass: false,
            log_every: 0,
            checkpoint_every: 0,
            divergence_threshold: 1e6,
        }
    }

    /// The `β = 0.125`, `λ_max = 8` preset.
    pub fn algorithm_preset(mode: SupervisionMode, steps: usize) -> Self {
        let mut c = Self::new(mode, steps);
        c.beta = 0.125;
        c.schedule.lambda_max = 8.0;
        c
    }

    pub fn steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta = {} outside [0, 1]", self.beta)));
        }
        if self.optimizer.learning_rate <= 0.0 || self.optimizer.epsilon <= 0.0 {
            return Err(Error::Config("learning rate and epsilon must be positive".into()));
        }
        if self.divergence_threshold <= 0.0 {
            return Err(Error::Config("divergence threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Training inputs. Unlabeled images carry a stable id for the target store.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub labeled: Vec<(Tensor, LabelMap)>,
    pub unlabeled: Vec<(String, Tensor)>,
    pub val: Vec<(Tensor, LabelMap)>,
}

impl TrainData {
    /// One pass over the unlabeled set, in every mode.
    pub fn epoch_len(&self) -> usize {
        if self.unlabeled.is_empty() {
            self.labeled.len().max(1)
        } else {
            self.unlabeled.len()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub train_loss: f64,
    pub val_mean_dice: f64,
    pub val_95hd: f64,
}

pub const LOG_HEADER: &str = "step,epoch,mode,alpha,lambda,train_loss,val_mean_dice,val_95hd";

pub fn log_csv(mode: SupervisionMode, rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:e},{:e},{:e},{:e},{:e}\n",
            r.step,
            r.epoch,
            mode.name(),
            r.alpha,
            r.lambda,
            r.train_loss,
            r.val_mean_dice,
            r.val_95hd
        ));
    }
    s
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub student: ModelParams,
    pub teacher: Option<ModelParams>,
    pub store: SoftTargetStore,
    pub adam: Adam,
    /// Best validation Dice and weights (kept in supervised-only mode).
    pub best: Option<(f64, ModelParams)>,
    pub log: Vec<LogRow>,
    loss_sum: f64,
    loss_count: usize,
    /// Bit hash of each step's soft target (not checkpointed).
    pub target_trace: Vec<u64>,
}

const STREAM_INIT: u64 = 0;
const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;

impl TrainState {
    pub fn new(cfg: &TrainConfig, net: &NetConfig) -> Result<Self> {
        let student = build_reconstructor(net, &mut derive_rng(cfg.seed, &[STREAM_INIT]))?;
        Ok(Self::from_params(cfg, student))
    }

    pub fn from_params(cfg: &TrainConfig, student: ModelParams) -> Self {
        Self {
            step: 0,
            teacher: cfg.mode.uses_teacher().then(|| student.clone()),
            store: SoftTargetStore::new(cfg.init_targets_from_prediction),
            adam: Adam::new(&student),
            student,
            best: None,
            log: Vec::new(),
            loss_sum: 0.0,
            loss_count: 0,
            target_trace: Vec::new(),
        }
    }

    pub fn to_checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("meta/train/step".to_string(), Tensor::scalar(self.step as f64)),
            ("meta/train/loss_sum".to_string(), Tensor::scalar(self.loss_sum)),
            ("meta/train/loss_count".to_string(), Tensor::scalar(self.loss_count as f64)),
        ];
        let rows: Vec<f64> = self
            .log
            .iter()
            .flat_map(|r| {
                [
                    r.step as f64,
                    r.epoch as f64,
                    r.alpha,
                    r.lambda,
                    r.train_loss,
                    r.val_mean_dice,
                    r.val_95hd,
                ]
            })
            .collect();
        out.push((
            "meta/train/log".to_string(),
            Tensor::new(&[self.log.len(), 7], rows).expect("log rows"),
        ));
        out.extend(self.student.to_checkpoint_entries("student/"));
        if let Some(t) = &self.teacher {
            out.extend(t.to_checkpoint_entries("teacher/"));
        }
        if let Some((d, b)) = &self.best {
            out.push(("meta/train/best_dice".to_string(), Tensor::scalar(*d)));
            out.extend(b.to_checkpoint_entries("best/"));
        }
        out.extend(self.adam.to_checkpoint_entries(self.student.entries()));
        out.extend(self.store.to_checkpoint_entries());
        out
    }

    pub fn from_checkpoint_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let find = |k: &str| entries.iter().find(|(n, _)| n == k).map(|(_, t)| t);
        let scalar = |k: &str| find(k).map(|t| t.item()).ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let student = ModelParams::from_checkpoint_entries(entries, "student/")?;
        let teacher = entries
            .iter()
            .any(|(n, _)| n.starts_with("teacher/"))
            .then(|| ModelParams::from_checkpoint_entries(entries, "teacher/"))
            .transpose()?;
        let best = match find("meta/train/best_dice") {
            Some(d) => Some((d.item(), ModelParams::from_checkpoint_entries(entries, "best/")?)),
            None => None,
        };
        let log_t = find("meta/train/log").ok_or_else(|| Error::Format("checkpoint lacks the metric log".into()))?;
        let log = log_t
            .data()
            .chunks_exact(7)
            .map(|r| LogRow {
                step: r[0] as usize,
                epoch: r[1] as usize,
                alpha: r[2],
                lambda: r[3],
                train_loss: r[4],
                val_mean_dice: r[5],
                val_95hd: r[6],
            })
            .collect();
        Ok(Self {
            step: scalar("meta/train/step")? as usize,
            adam: Adam::from_checkpoint_entries(entries, &student)?,
            store: SoftTargetStore::from_checkpoint_entries(entries)?,
            student,
            teacher,
            best,
            log,
            loss_sum: scalar("meta/train/loss_sum")?,
            loss_count: scalar("meta/train/loss_count")? as usize,
            target_trace: Vec::new(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::diffcore::checkpoint::save(path, &self.to_checkpoint_entries())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint_entries(&crate::diffcore::checkpoint::load(path)?)
    }
}

/// Bit-level FNV-1a hash of a field.
pub fn field_hash(f: &ProbField) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in f.data() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Soft target for one unlabeled example, per the mode's update rule.
fn form_target(
    cfg: &TrainConfig,
    state: &TrainState,
    denoiser: &DenoiserSpec,
    id: &str,
    u: &Tensor,
    f: &ProbField,
    alpha: f64,
    beta: f64,
) -> Result<ProbField> {
    let af = if alpha * beta > 0.0 {
        apply_denoiser(denoiser, f)?
    } else {
        f.clone()
    };
    if let Some(teacher) = &state.teacher {
        let ft = nets::forward(teacher, u)?;
        let ab = alpha * beta;
        return ProbField::combine(&[(ab, &af), (1.0 - ab, &ft)]);
    }
    let z_prev = if cfg.mode.uses_store() {
        state.store.previous(id, f)
    } else {
        ProbField::zeros(f.classes(), f.height(), f.width())
    };
    let loss = cfg.objective.unsupervised_kind();
    match (cfg.mode, cfg.target_step) {
        (SupervisionMode::SudStored, TargetStep::ProjectedDescent) => {
            target_update_projected(&z_prev, f, &af, alpha, beta, loss, cfg.objective.dice)
        }
        (SupervisionMode::SudStored, TargetStep::ExponentialDescent) => {
            Ok(target_update_exponential(&z_prev, f, &af, alpha, beta, loss, cfg.objective.dice)?.target)
        }
        _ => target_update_blend(&z_prev, f, &af, alpha, beta),
    }
}

fn gradients(g: &Graph, out: Var, bound: &nets::BoundParams) -> Result<Vec<Tensor>> {
    let grads = g.backward(out, None)?;
    Ok(bound
        .vars()
        .iter()
        .map(|&v| grads.get(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect())
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            step,
            reason: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

/// One iteration: forward both examples, form the detached soft target,
/// back-propagate the combined loss, update weights, then the teacher or store.
pub fn sud_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    denoiser: &DenoiserSpec,
    labeled: (&Tensor, &LabelMap),
    unlabeled: Option<(&str, &Tensor)>,
) -> Result<f64> {
    let n = state.step;
    sud_step_inner(state, cfg, denoiser, labeled, unlabeled).map_err(|e| diverged(n, e))
}

fn sud_step_inner(
    state: &mut TrainState,
    cfg: &TrainConfig,
    denoiser: &DenoiserSpec,
    labeled: (&Tensor, &LabelMap),
    unlabeled: Option<(&str, &Tensor)>,
) -> Result<f64> {
    let n = state.step;
    let (alpha_s, lambda) = schedule_at(&cfg.schedule, n)?;
    let (alpha, beta) = cfg.mode.effective(alpha_s, cfg.beta);
    let net = state.student.config.clone();
    let mut lab_rng = derive_rng(cfg.seed, &[STREAM_LABELED, n as u64]);
    let mut unl_rng = derive_rng(cfg.seed, &[STREAM_UNLABELED, n as u64]);

    let (x, y) = augment(labeled.0, labeled.1, &mut lab_rng, &cfg.augment)?;
    let y = ProbField::one_hot(&y);

    let unl = match unlabeled {
        Some((id, u)) if cfg.mode.uses_unlabeled() => Some((id, augment_photometric(u, &mut unl_rng, &cfg.augment))),
        _ => None,
    };

    let mut g = Graph::new();
    let bound = state.student.bind(&mut g, "", true);
    let mut target = None;
    let mut unsup = None;
    if let Some((id, u)) = &unl {
        let uv = g.input("u", u.clone());
        let fu = forward_graph(&net, &mut g, &bound, uv, Some(&mut unl_rng as &mut dyn RngCore))?;
        let f = ProbField::from_tensor(g.value(fu).clone())?;
        let z = form_target(cfg, state, denoiser, id, u, &f, alpha, beta)?;
        let lu = loss_graph(cfg.objective.unsupervised_kind(), &mut g, &z, fu, cfg.objective.dice)?;
        unsup = Some(g.scale(lu, lambda)?);
        target = Some(((*id).to_string(), z));
    }

    let total_value;
    if cfg.two_pass {
        let mut lu_value = 0.0;
        if let Some(lu) = unsup {
            lu_value = g.value(lu).item();
            let grads = gradients(&g, lu, &bound)?;
            state.adam.step(&cfg.optimizer, &mut state.student, &grads)?;
        }
        let mut g2 = Graph::new();
        let bound2 = state.student.bind(&mut g2, "", true);
        let xv = g2.input("x", x);
        let fx = forward_graph(&net, &mut g2, &bound2, xv, Some(&mut lab_rng as &mut dyn RngCore))?;
        let ls = loss_graph(cfg.objective.supervised, &mut g2, &y, fx, cfg.objective.dice)?;
        total_value = g2.value(ls).item() + lu_value;
        let grads = gradients(&g2, ls, &bound2)?;
        state.adam.step(&cfg.optimizer, &mut state.student, &grads)?;
    } else {
        let xv = g.input("x", x);
        let fx = forward_graph(&net, &mut g, &bound, xv, Some(&mut lab_rng as &mut dyn RngCore))?;
        let ls = loss_graph(cfg.objective.supervised, &mut g, &y, fx, cfg.objective.dice)?;
        let total = match unsup {
            Some(lu) => g.add(ls, lu)?,
            None => ls,
        };
        total_value = g.value(total).item();
        let grads = gradients(&g, total, &bound)?;
        state.adam.step(&cfg.optimizer, &mut state.student, &grads)?;
    }

    if !total_value.is_finite() || total_value > cfg.divergence_threshold {
        return Err(Error::Diverged {
            step: n,
            reason: format!("loss {total_value:e} exceeds {:e}", cfg.divergence_threshold),
        });
    }
    if state.student.entries().iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::Diverged {
            step: n,
            reason: "non-finite weights".into(),
        });
    }

    if let Some(teacher) = state.teacher.as_mut() {
        teacher_update(teacher, &state.student, alpha_bar(alpha, beta))?;
    }
    if let Some((id, z)) = target {
        state.target_trace.push(field_hash(&z));
        if cfg.mode.uses_store() {
            state.store.insert(&id, z);
        }
    }
    state.loss_sum += total_value;
    state.loss_count += 1;
    state.step += 1;
    Ok(total_value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub dice: f64,
    pub per_class: Vec<Option<f64>>,
    pub hd95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub images: Vec<ImageMetrics>,
    pub mean_dice: f64,
    pub median_dice: f64,
    pub mean_hd95: f64,
    pub median_hd95: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn median_of(v: &[f64]) -> f64 {
    median(v)
}

/// Hard-label Dice and 95HD of `params` on `data`.
pub fn evaluate(params: &ModelParams, data: &[(Tensor, LabelMap)]) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let c = params.config.n_classes;
    let images = data
        .iter()
        .map(|(x, y)| {
            let pred = nets::forward(params, x)?.argmax();
            let d = mean_dice(&pred, y, c)?;
            Ok(ImageMetrics {
                dice: d.mean,
                per_class: d.per_class,
                hd95: mean_hausdorff95(&pred, y, c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dice: Vec<f64> = images.iter().map(|m| m.dice).collect();
    let hd: Vec<f64> = images.iter().map(|m| m.hd95).collect();
    Ok(EvalSummary {
        mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
        median_dice: median(&dice),
        mean_hd95: hd.iter().sum::<f64>() / hd.len() as f64,
        median_hd95: median(&hd),
        images,
    })
}

/// Advances `state` to `until` steps, logging and validating on schedule and
/// calling `on_checkpoint` every `checkpoint_every` steps.
pub fn run(
    state: &mut TrainState,
    cfg: &TrainConfig,
    denoiser: &DenoiserSpec,
    data: &TrainData,
    until: usize,
    on_checkpoint: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::Data("no labeled examples".into()));
    }
    if cfg.mode.uses_unlabeled() && data.unlabeled.is_empty() {
        return Err(Error::Data(format!("mode {} needs unlabeled examples", cfg.mode.name())));
    }
    let until = until.min(cfg.steps());
    let epoch = data.epoch_len();
    let log_every = if cfg.log_every == 0 { epoch } else { cfg.log_every };
    while state.step < until {
        let n = state.step;
        let lab = &data.labeled[n % data.labeled.len()];
        let unl = (!data.unlabeled.is_empty()).then(|| {
            let (id, u) = &data.unlabeled[n % data.unlabeled.len()];
            (id.as_str(), u)
        });
        sud_step(state, cfg, denoiser, (&lab.0, &lab.1), unl)?;
        let done = state.step;
        if done.is_multiple_of(log_every) || done == cfg.steps() {
            let (alpha, lambda) = schedule_at(&cfg.schedule, n)?;
            let (alpha, _) = cfg.mode.effective(alpha, cfg.beta);
            let lambda = if cfg.mode.uses_unlabeled() { lambda } else { 0.0 };
            let (dice, hd) = if data.val.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                let s = evaluate(&state.student, &data.val)?;
                (s.mean_dice, s.mean_hd95)
            };
            if cfg.mode == SupervisionMode::SupervisedOnly && !dice.is_nan() && state.best.as_ref().is_none_or(|(b, _)| dice > *b) {
                state.best = Some((dice, state.student.clone()));
            }
            state.log.push(LogRow {
                step: done,
                epoch: done.div_ceil(epoch),
                alpha,
                lambda,
                train_loss: state.loss_sum / state.loss_count.max(1) as f64,
                val_mean_dice: dice,
                val_95hd: hd,
            });
            state.loss_sum = 0.0;
            state.loss_count = 0;
        }
        if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) {
            on_checkpoint(state)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final weights, or the best-validation weights in supervised-only mode.
    pub model: ModelParams,
    pub state: TrainState,
}

/// Trains from a fresh initialization for the configured number of steps.
pub fn train(cfg: &TrainConfig, net: &NetConfig, denoiser: &DenoiserSpec, data: &TrainData) -> Result<TrainOutcome> {
    let mut state = TrainState::new(cfg, net)?;
    run(&mut state, cfg, denoiser, data, cfg.steps(), &mut |_| Ok(()))?;
    Ok(finish(cfg, state))
}

pub fn finish(cfg: &TrainConfig, state: TrainState) -> TrainOutcome {
    let model = match (&state.best, cfg.mode) {
        (Some((_, b)), SupervisionMode::SupervisedOnly) => b.clone(),
        _ => state.student.clone(),
    };
    TrainOutcome { model, state }
}

/// `G(Θ) + (1/U) Σ [λ D(z, f(u|Θ)) + βλ R(z)]` with `R(z) = ½<z, z - a(z)>`,
/// evaluated deterministically for monitoring.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective(
    params: &ModelParams,
    store: &SoftTargetStore,
    labeled: &[(Tensor, LabelMap)],
    unlabeled: &[(String, Tensor)],
    objective: &Objective,
    lambda: f64,
    beta: f64,
    denoiser: &DenoiserSpec,
) -> Result<f64> {
    let scalar_loss = |kind: LossKind, target: &ProbField, x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, "", false);
        let xv = g.input("x", x.clone());
        let f = forward_graph(&params.config, &mut g, &bound, xv, None)?;
        let l = loss_graph(kind, &mut g, target, f, objective.dice)?;
        Ok(g.value(l).item())
    };
    let mut supervised = 0.0;
    for (x, y) in labeled {
        supervised += scalar_loss(objective.supervised, &ProbField::one_hot(y), x)?;
    }
    let g_theta = if labeled.is_empty() {
        0.0
    } else {
        supervised / labeled.len() as f64
    };
    if unlabeled.is_empty() || (lambda == 0.0 && beta == 0.0) {
        return Ok(g_theta);
    }
    let mut reg = 0.0;
    for (id, u) in unlabeled {
        let z = store
            .get(id)
            .ok_or_else(|| Error::Data(format!("no soft target for {id}")))?;
        let d = scalar_loss(objective.unsupervised_kind(), z, u)?;
        let az = apply_denoiser(denoiser, z)?;
        let r: f64 = 0.5 * z.data().iter().zip(az.data()).map(|(a, b)| a * (a - b)).sum::<f64>();
        reg += lambda * d + beta * lambda * r;
    }
    Ok(g_theta + reg / unlabeled.len() as f64)
}

#[cfg(test)]
mod tests;
