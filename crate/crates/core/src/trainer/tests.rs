use super::*;
use crate::nets::Downsampling;
use crate::synth::{gen_scene, ShapeSceneConfig};
use crate::temporal::{AlphaCurve, LambdaCurve};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_net() -> NetConfig {
    NetConfig {
        levels: 2,
        base_features: 2,
        max_features: 4,
        in_channels: 1,
        n_classes: 3,
        skip_connections: true,
        downsampling: Downsampling::StridedConv,
        convs_per_level: 1,
        dropout: 0.1,
    }
}

fn tiny_data(labeled: usize, unlabeled: usize, val: usize) -> TrainData {
    let scene = ShapeSceneConfig {
        height: 16,
        width: 16,
        radius: (3.0, 6.0),
        ..ShapeSceneConfig::desk(3)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pairs = |n: usize| (0..n).map(|_| gen_scene(&scene, &mut rng).unwrap()).collect::<Vec<_>>();
    let labeled = pairs(labeled);
    let unlabeled = pairs(unlabeled)
        .into_iter()
        .enumerate()
        .map(|(i, (x, _))| (format!("unlabeled-{i:04}"), x))
        .collect();
    let val = pairs(val);
    TrainData { labeled, unlabeled, val }
}

fn weights_bits(p: &ModelParams) -> Vec<u64> {
    p.entries().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

fn gaussian() -> DenoiserSpec {
    DenoiserSpec::Gaussian { sigma: 1.0, radius: 2 }
}

fn run_steps(cfg: &TrainConfig, data: &TrainData, steps: usize) -> TrainState {
    let mut state = TrainState::new(cfg, &tiny_net()).unwrap();
    run(&mut state, cfg, &gaussian(), data, steps, &mut |_| Ok(())).unwrap();
    state
}

#[test]
fn mode_names_round_trip() {
    for m in SupervisionMode::ALL {
        assert_eq!(SupervisionMode::parse(m.name()).unwrap(), m);
    }
    assert!(matches!(SupervisionMode::parse("nope"), Err(Error::Config(_))));
}

#[test]
fn first_step_without_unlabeled_weight_matches_supervised() {
    let data = tiny_data(2, 2, 0);
    let sup = run_steps(&TrainConfig::new(SupervisionMode::SupervisedOnly, 10), &data, 1);
    for mode in [SupervisionMode::SudStored, SupervisionMode::SudTeacher, SupervisionMode::TemporalEnsembling] {
        let sud = run_steps(&TrainConfig::new(mode, 10), &data, 1);
        assert_eq!(weights_bits(&sud.student), weights_bits(&sup.student), "{}", mode.name());
    }
}

#[test]
fn red_target_is_the_denoised_prediction() {
    let data = tiny_data(1, 1, 0);
    let cfg = TrainConfig::new(SupervisionMode::Red, 10);
    let state = TrainState::new(&cfg, &tiny_net()).unwrap();
    let (id, u) = &data.unlabeled[0];
    let f = nets::forward(&state.student, u).unwrap();
    let (a, b) = cfg.mode.effective(0.3, 0.0);
    let z = form_target(&cfg, &state, &gaussian(), id, u, &f, a, b).unwrap();
    assert_eq!(z, apply_denoiser(&gaussian(), &f).unwrap());
    let pi = TrainConfig::new(SupervisionMode::PiModel, 10);
    let (a, b) = pi.mode.effective(0.3, 0.7);
    assert_eq!(form_target(&pi, &state, &gaussian(), id, u, &f, a, b).unwrap(), f);
}

fn assert_same_run(a: &TrainConfig, b: &TrainConfig, data: &TrainData, steps: usize) {
    let sa = run_steps(a, data, steps);
    let sb = run_steps(b, data, steps);
    assert_eq!(sa.target_trace, sb.target_trace);
    assert_eq!(weights_bits(&sa.student), weights_bits(&sb.student));
    let rows = |s: &TrainState| log_csv(SupervisionMode::SudStored, &s.log);
    assert_eq!(rows(&sa), rows(&sb));
}

#[test]
fn sud_reduces_to_its_special_cases() {
    let data = tiny_data(2, 3, 1);
    let steps = 8;

    let mut sud = TrainConfig::new(SupervisionMode::SudStored, steps);
    sud.beta = 0.0;
    assert_same_run(&sud, &TrainConfig::new(SupervisionMode::TemporalEnsembling, steps), &data, steps);

    let mut sud_t = TrainConfig::new(SupervisionMode::SudTeacher, steps);
    sud_t.beta = 0.0;
    assert_same_run(&sud_t, &TrainConfig::new(SupervisionMode::MeanTeacher, steps), &data, steps);

    let mut red_like = TrainConfig::new(SupervisionMode::SudStored, steps);
    red_like.beta = 1.0;
    red_like.schedule.alpha_curve = AlphaCurve::Constant(1.0);
    assert_same_run(&red_like, &TrainConfig::new(SupervisionMode::Red, steps), &data, steps);

    let mut pi_like = TrainConfig::new(SupervisionMode::TemporalEnsembling, steps);
    pi_like.schedule.alpha_curve = AlphaCurve::Constant(1.0);
    assert_same_run(&pi_like, &TrainConfig::new(SupervisionMode::PiModel, steps), &data, steps);
}

#[test]
fn resume_is_bit_exact() {
    let data = tiny_data(2, 3, 2);
    let mut cfg = TrainConfig::new(SupervisionMode::SudTeacher, 9);
    cfg.log_every = 2;
    cfg.checkpoint_every = 4;
    let straight = run_steps(&cfg, &data, 9);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.sudt");
    let mut state = TrainState::new(&cfg, &tiny_net()).unwrap();
    run(&mut state, &cfg, &gaussian(), &data, 5, &mut |s| s.save(&path)).unwrap();
    let mut resumed = TrainState::load(&path).unwrap();
    assert_eq!(resumed.step, 4);
    run(&mut resumed, &cfg, &gaussian(), &data, 9, &mut |_| Ok(())).unwrap();

    assert_eq!(weights_bits(&resumed.student), weights_bits(&straight.student));
    assert_eq!(
        weights_bits(resumed.teacher.as_ref().unwrap()),
        weights_bits(straight.teacher.as_ref().unwrap())
    );
    assert_eq!(resumed.log.len(), straight.log.len());
    for (a, b) in resumed.log.iter().zip(&straight.log) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.val_mean_dice.to_bits(), b.val_mean_dice.to_bits());
    }
}

#[test]
fn stored_targets_survive_a_checkpoint() {
    let data = tiny_data(1, 2, 0);
    let cfg = TrainConfig::new(SupervisionMode::SudStored, 6);
    let state = run_steps(&cfg, &data, 3);
    assert_eq!(state.store.len(), 2);
    let back = TrainState::from_checkpoint_entries(&state.to_checkpoint_entries()).unwrap();
    assert_eq!(back.store.len(), 2);
    for (id, z) in state.store.iter() {
        assert_eq!(back.store.get(id).unwrap(), z);
    }
    assert_eq!(back.adam.t, state.adam.t);
}

#[test]
fn zero_steps_returns_the_initialization() {
    let data = tiny_data(1, 1, 0);
    let cfg = TrainConfig::new(SupervisionMode::SudStored, 0);
    let out = train(&cfg, &tiny_net(), &gaussian(), &data).unwrap();
    let init = TrainState::new(&cfg, &tiny_net()).unwrap();
    assert_eq!(weights_bits(&out.model), weights_bits(&init.student));
    assert!(out.state.log.is_empty());
}

#[test]
fn teacher_tracks_student_at_rate_alpha_bar() {
    let data = tiny_data(1, 1, 0);
    let mut cfg = TrainConfig::new(SupervisionMode::MeanTeacher, 4);
    cfg.schedule.alpha_curve = AlphaCurve::Constant(1.0);
    let s = run_steps(&cfg, &data, 2);
    // ᾱ = 1 copies the student.
    assert_eq!(weights_bits(s.teacher.as_ref().unwrap()), weights_bits(&s.student));
    cfg.schedule.alpha_curve = AlphaCurve::Constant(0.0);
    let s = run_steps(&cfg, &data, 2);
    let init = TrainState::new(&cfg, &tiny_net()).unwrap();
    assert_eq!(weights_bits(s.teacher.as_ref().unwrap()), weights_bits(&init.student));
}

#[test]
fn divergence_is_reported_with_the_step() {
    let data = tiny_data(1, 1, 0);
    let mut cfg = TrainConfig::new(SupervisionMode::SupervisedOnly, 4);
    cfg.divergence_threshold = 1e-12;
    let mut state = TrainState::new(&cfg, &tiny_net()).unwrap();
    let err = run(&mut state, &cfg, &gaussian(), &data, 4, &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }));
}

#[test]
fn missing_unlabeled_data_is_rejected() {
    let data = tiny_data(1, 0, 0);
    let cfg = TrainConfig::new(SupervisionMode::SudStored, 4);
    let mut state = TrainState::new(&cfg, &tiny_net()).unwrap();
    assert!(matches!(run(&mut state, &cfg, &gaussian(), &data, 4, &mut |_| Ok(())), Err(Error::Data(_))));
}

#[test]
fn supervised_training_fits_a_single_image() {
    let data = tiny_data(1, 0, 0);
    let mut cfg = TrainConfig::new(SupervisionMode::SupervisedOnly, 300);
    cfg.optimizer.learning_rate = 1e-2;
    cfg.augment = AugmentOptions::none();
    cfg.objective.supervised = LossKind::CrossEntropy;
    let mut net = tiny_net();
    net.base_features = 4;
    net.max_features = 8;
    net.dropout = 0.0;
    let before = evaluate(&TrainState::new(&cfg, &net).unwrap().student, &data.labeled).unwrap();
    let out = train(&cfg, &net, &DenoiserSpec::Identity, &data).unwrap();
    let after = evaluate(&out.model, &data.labeled).unwrap();
    assert!(after.mean_dice > 0.8 && after.mean_dice > before.mean_dice, "{before:?} -> {after:?}");
}

#[test]
fn log_rows_follow_the_epoch_cadence() {
    let data = tiny_data(2, 3, 1);
    let mut cfg = TrainConfig::new(SupervisionMode::TemporalEnsembling, 7);
    cfg.schedule.lambda_curve = LambdaCurve::Gaussian;
    let s = run_steps(&cfg, &data, 7);
    let steps: Vec<usize> = s.log.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![3, 6, 7]);
    assert_eq!(s.log[2].epoch, 3);
    let csv = log_csv(cfg.mode, &s.log);
    assert!(csv.starts_with(LOG_HEADER));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn joint_objective_reduces_to_supervised_term() {
    let data = tiny_data(2, 1, 0);
    let cfg = TrainConfig::new(SupervisionMode::SudStored, 4);
    let s = run_steps(&cfg, &data, 2);
    let obj = Objective::default();
    let g = joint_objective(&s.student, &s.store, &data.labeled, &[], &obj, 3.0, 0.1, &gaussian()).unwrap();
    let with_u =
        joint_objective(&s.student, &s.store, &data.labeled, &data.unlabeled, &obj, 0.0, 0.0, &gaussian()).unwrap();
    assert_eq!(g, with_u);
    let full =
        joint_objective(&s.student, &s.store, &data.labeled, &data.unlabeled, &obj, 2.0, 0.1, &gaussian()).unwrap();
    assert!(full.is_finite() && full > g);
}

#[test]
fn median_handles_even_and_odd() {
    assert_eq!(median_of(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median_of(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median_of(&[]).is_nan());
}
