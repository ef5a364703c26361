//! Temporal filtering across training steps: EMA soft targets, schedules and
//! teacher weight averaging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::losses::ProbField;
use crate::nets::ModelParams;

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("{name} = {v} outside [0, 1]")))
    }
}

/// `α·x_new + (1-α)·z_prev`.
pub fn ema_update(z_prev: &ProbField, x_new: &ProbField, alpha: f64) -> Result<ProbField> {
    check_unit("alpha", alpha)?;
    ProbField::combine(&[(alpha, x_new), (1.0 - alpha, z_prev)])
}

/// First `length` taps `α(1-α)^k` of the EMA filter.
pub fn impulse_response(alpha: f64, length: usize) -> Result<Vec<f64>> {
    check_unit("alpha", alpha)?;
    if alpha == 0.0 {
        log::warn!("impulse response of a zero-gain filter is identically zero");
    }
    let mut out = Vec::with_capacity(length);
    let mut tap = alpha;
    for _ in 0..length {
        out.push(tap);
        tap *= 1.0 - alpha;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum AlphaCurve {
    LinearDown,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum LambdaCurve {
    LinearUp,
    Constant(f64),
    /// `λ_max·exp(-5(1 - n/N)²)`, the sigmoid-shaped ramp used by temporal ensembling.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub total_steps: usize,
    pub lambda_max: f64,
    pub alpha_curve: AlphaCurve,
    pub lambda_curve: LambdaCurve,
}

impl Schedule {
    pub fn linear(total_steps: usize, lambda_max: f64) -> Self {
        Self {
            total_steps,
            lambda_max,
            alpha_curve: AlphaCurve::LinearDown,
            lambda_curve: LambdaCurve::LinearUp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_max < 0.0 || !self.lambda_max.is_finite() {
            return Err(Error::Config(format!("lambda_max = {} must be finite and >= 0", self.lambda_max)));
        }
        if let AlphaCurve::Constant(a) = self.alpha_curve {
            check_unit("constant alpha", a).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let LambdaCurve::Constant(l) = self.lambda_curve {
            if l < 0.0 || !l.is_finite() {
                return Err(Error::Config(format!("constant lambda = {l} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// `(α, λ)` at step `n` of `N`.
pub fn schedule_at(s: &Schedule, n: usize) -> Result<(f64, f64)> {
    if n > s.total_steps {
        return Err(Error::OutOfRange(format!("step {n} beyond schedule length {}", s.total_steps)));
    }
    let t = if s.total_steps == 0 {
        0.0
    } else {
        n as f64 / s.total_steps as f64
    };
    let alpha = match s.alpha_curve {
        AlphaCurve::LinearDown => 1.0 - t,
        AlphaCurve::Constant(a) => a,
    };
    let lambda = match s.lambda_curve {
        LambdaCurve::LinearUp => t * s.lambda_max,
        LambdaCurve::Constant(l) => l,
        LambdaCurve::Gaussian => s.lambda_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp(),
    };
    Ok((alpha, lambda))
}

/// Teacher EMA rate `ᾱ = (α - αβ) / (1 - αβ)`; 1 when `αβ = 1`.
pub fn alpha_bar(alpha: f64, beta: f64) -> f64 {
    let ab = alpha * beta;
    if ab >= 1.0 {
        1.0
    } else {
        (alpha - ab) / (1.0 - ab)
    }
}

/// In place `Ω ← ᾱ·Θ + (1-ᾱ)·Ω`.
pub fn teacher_update(teacher: &mut ModelParams, student: &ModelParams, alpha_bar: f64) -> Result<()> {
    check_unit("alpha_bar", alpha_bar)?;
    if teacher.config != student.config {
        return Err(Error::Incongruent("teacher and student configs differ".into()));
    }
    for ((tn, t), (sn, s)) in teacher.entries_mut().zip(student.entries()) {
        if tn != sn || t.shape() != s.shape() {
            return Err(Error::Incongruent(format!("{tn} vs {sn}")));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = alpha_bar * sv + (1.0 - alpha_bar) * *tv;
        }
    }
    Ok(())
}

pub const SOFT_TARGET_PREFIX: &str = "soft_target/";

/// Per-example soft targets `zⁿ`, keyed by example id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SoftTargetStore {
    targets: BTreeMap<String, ProbField>,
    /// Seed a missing target with the first prediction instead of the zero field.
    pub init_from_prediction: bool,
}

impl SoftTargetStore {
    pub fn new(init_from_prediction: bool) -> Self {
        Self {
            targets: BTreeMap::new(),
            init_from_prediction,
        }
    }

    pub fn get(&self, id: &str) -> Option<&ProbField> {
        self.targets.get(id)
    }

    /// Stored target, or the initial value for an unseen example.
    pub fn previous(&self, id: &str, prediction: &ProbField) -> ProbField {
        match self.targets.get(id) {
            Some(z) => z.clone(),
            None if self.init_from_prediction => prediction.clone(),
            None => ProbField::zeros(prediction.classes(), prediction.height(), prediction.width()),
        }
    }

    pub fn insert(&mut self, id: &str, z: ProbField) {
        self.targets.insert(id.to_string(), z);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ProbField)> {
        self.targets.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            "meta/store/init_from_prediction".to_string(),
            Tensor::scalar(self.init_from_prediction as u8 as f64),
        )];
        out.extend(
            self.targets
                .iter()
                .map(|(k, v)| (format!("{SOFT_TARGET_PREFIX}{k}"), v.as_tensor().clone())),
        );
        out
    }

    pub fn from_checkpoint_entries(entries: &[(String, Tensor)]) -> Result<Self> {
        let mut store = Self::default();
        for (n, t) in entries {
            if n == "meta/store/init_from_prediction" {
                store.init_from_prediction = t.item() != 0.0;
            } else if let Some(id) = n.strip_prefix(SOFT_TARGET_PREFIX) {
                store.targets.insert(id.to_string(), ProbField::from_tensor(t.clone())?);
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_reconstructor, NetConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(v: &[f64]) -> ProbField {
        ProbField::new(v.len(), 1, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn ema_endpoints_and_two_step_unroll() {
        let z = field(&[0.2, 0.8]);
        let x = field(&[0.6, 0.4]);
        assert_eq!(ema_update(&z, &x, 1.0).unwrap(), x);
        assert_eq!(ema_update(&z, &x, 0.0).unwrap(), z);
        assert!(ema_update(&z, &x, 1.1).is_err());

        let a = field(&[1.0, 2.0]);
        let b = field(&[4.0, -1.0]);
        let z0 = field(&[0.0, 0.0]);
        let z2 = ema_update(&ema_update(&z0, &a, 0.5).unwrap(), &b, 0.5).unwrap();
        assert_eq!(z2.data(), &[0.25 * 1.0 + 0.5 * 4.0, 0.25 * 2.0 - 0.5]);
    }

    #[test]
    fn impulse_response_cases() {
        assert_eq!(impulse_response(0.5, 3).unwrap(), vec![0.5, 0.25, 0.125]);
        assert_eq!(impulse_response(1.0, 4).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        let s: f64 = impulse_response(0.1, 50).unwrap().iter().sum();
        assert!((s - (1.0 - 0.9f64.powi(50))).abs() < 1e-12);
        assert!((s - 0.99485).abs() < 1e-5);
        assert!(impulse_response(0.0, 3).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_schedule_endpoints() {
        let s = Schedule::linear(1000, 8.0);
        assert_eq!(schedule_at(&s, 0).unwrap(), (1.0, 0.0));
        assert_eq!(schedule_at(&s, 1000).unwrap(), (0.0, 8.0));
        assert_eq!(schedule_at(&s, 500).unwrap(), (0.5, 4.0));
        assert!(schedule_at(&s, 1001).is_err());
        let mut prev = (f64::INFINITY, f64::NEG_INFINITY);
        for n in 0..=1000 {
            let (a, l) = schedule_at(&s, n).unwrap();
            assert!(a <= prev.0 && l >= prev.1);
            prev = (a, l);
        }
    }

    #[test]
    fn gaussian_ramp_reaches_lambda_max() {
        let s = Schedule {
            lambda_curve: LambdaCurve::Gaussian,
            ..Schedule::linear(10, 4.0)
        };
        assert_eq!(schedule_at(&s, 10).unwrap().1, 4.0);
        assert!(schedule_at(&s, 0).unwrap().1 < 0.03);
    }

    #[test]
    fn alpha_bar_cases() {
        assert_eq!(alpha_bar(1.0, 0.3), 1.0);
        assert_eq!(alpha_bar(0.7, 0.0), 0.7);
        assert!((alpha_bar(0.5, 0.2) - 0.4 / 0.9).abs() < 1e-15);
        assert_eq!(alpha_bar(1.0, 1.0), 1.0);
    }

    #[test]
    fn teacher_tracks_student() {
        let cfg = NetConfig {
            levels: 2,
            base_features: 2,
            max_features: 4,
            ..NetConfig::reconstructor(1, 2)
        };
        let student = build_reconstructor(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut teacher = build_reconstructor(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let start = teacher.clone();
        teacher_update(&mut teacher, &student, 0.25).unwrap();
        for (((_, t), (_, s)), (_, t0)) in teacher.entries().iter().zip(student.entries()).zip(start.entries()) {
            for i in 0..t.len() {
                assert_eq!(t.data()[i], 0.25 * s.data()[i] + 0.75 * t0.data()[i]);
            }
        }
        teacher_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher, student);

        let other = build_reconstructor(&NetConfig { levels: 3, ..cfg }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(teacher_update(&mut teacher, &other, 0.5), Err(Error::Incongruent(_))));
    }

    #[test]
    fn store_initialization_modes() {
        let pred = field(&[0.3, 0.7]);
        let zero_init = SoftTargetStore::new(false);
        assert_eq!(zero_init.previous("a", &pred).data(), &[0.0, 0.0]);
        let pred_init = SoftTargetStore::new(true);
        assert_eq!(pred_init.previous("a", &pred), pred);

        let mut s = SoftTargetStore::new(true);
        s.insert("u/3", pred.clone());
        let back = SoftTargetStore::from_checkpoint_entries(&s.to_checkpoint_entries()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn ema_stays_on_simplex(p in 0.0f64..1.0, q in 0.0f64..1.0, alpha in 0.0f64..=1.0) {
            let z = field(&[p, 1.0 - p]);
            let x = field(&[q, 1.0 - q]);
            prop_assert!(ema_update(&z, &x, alpha).unwrap().simplex_violation() < 1e-12);
        }

        #[test]
        fn unrolled_ema_error_decays_geometrically(alpha in 0.05f64..=1.0, k in 1usize..30, z0 in -1.0f64..1.0) {
            let target = field(&[0.5]);
            let mut z = field(&[z0]);
            for _ in 0..k {
                z = ema_update(&z, &target, alpha).unwrap();
            }
            let expect = (1.0 - alpha).powi(k as i32) * (z0 - 0.5);
            prop_assert!(((z.data()[0] - 0.5) - expect).abs() < 1e-12);
        }
    }
}
