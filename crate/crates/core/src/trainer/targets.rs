//! Soft-target updates: the convex blend and its projected and exponential
//! descent generalizations.

use crate::diffcore::{softmax_channels_inplace, Tensor};
use crate::error::{Error, Result};
use crate::losses::{target_gradient, DiceOptions, LossKind, ProbField, PROB_FLOOR};

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    for (n, v) in [("alpha", alpha), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("{n} = {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// `(1-α)·z_prev + α(1-β)·f + αβ·af`.
pub fn target_update_blend(z_prev: &ProbField, f: &ProbField, af: &ProbField, alpha: f64, beta: f64) -> Result<ProbField> {
    check_weights(alpha, beta)?;
    ProbField::combine(&[(1.0 - alpha, z_prev), (alpha * (1.0 - beta), f), (alpha * beta, af)])
}

/// Euclidean projection of `v` onto the probability simplex.
pub fn project_simplex(v: &mut [f64]) {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Descent direction `α·D'(z_prev, f) + αβ·(f - af)`.
fn step(z_prev: &ProbField, f: &ProbField, af: &ProbField, alpha: f64, beta: f64, loss: LossKind, dice: DiceOptions) -> Result<Tensor> {
    check_weights(alpha, beta)?;
    z_prev.same_shape(f)?;
    f.same_shape(af)?;
    let g = target_gradient(loss, z_prev, f, dice)?;
    let d = g
        .data()
        .iter()
        .zip(f.data().iter().zip(af.data()))
        .map(|(gv, (fv, av))| alpha * gv + alpha * beta * (fv - av))
        .collect();
    Tensor::new(g.shape(), d)
}

/// Projection onto the simplex of `z_prev - α·D'(z_prev, f) - αβ·(f - a(f))`.
pub fn target_update_projected(
    z_prev: &ProbField,
    f: &ProbField,
    af: &ProbField,
    alpha: f64,
    beta: f64,
    loss: LossKind,
    dice: DiceOptions,
) -> Result<ProbField> {
    let s = step(z_prev, f, af, alpha, beta, loss, dice)?;
    let (c, p) = (z_prev.classes(), z_prev.pixels());
    let mut out: Vec<f64> = z_prev.data().iter().zip(s.data()).map(|(z, d)| z - d).collect();
    let mut px = vec![0.0; c];
    for i in 0..p {
        for k in 0..c {
            px[k] = out[k * p + i];
        }
        project_simplex(&mut px);
        for k in 0..c {
            out[k * p + i] = px[k];
        }
    }
    ProbField::new(c, z_prev.height(), z_prev.width(), out)
}

/// Result of the exponential (mirror descent) update.
#[derive(Clone, Debug)]
pub struct ExpUpdate {
    pub target: ProbField,
    /// Entries of `z_prev` clamped up to the probability floor.
    pub clamped: usize,
}

/// Per-pixel `softmax(log z_prev - α·D'(z_prev, f) - αβ·(f - a(f)))`.
pub fn target_update_exponential(
    z_prev: &ProbField,
    f: &ProbField,
    af: &ProbField,
    alpha: f64,
    beta: f64,
    loss: LossKind,
    dice: DiceOptions,
) -> Result<ExpUpdate> {
    let s = step(z_prev, f, af, alpha, beta, loss, dice)?;
    let mut clamped = 0;
    let mut out: Vec<f64> = z_prev
        .data()
        .iter()
        .zip(s.data())
        .map(|(&z, d)| {
            if z < PROB_FLOOR {
                clamped += 1;
            }
            z.max(PROB_FLOOR).ln() - d
        })
        .collect();
    softmax_channels_inplace(&mut out, z_prev.classes(), z_prev.pixels());
    Ok(ExpUpdate {
        target: ProbField::new(z_prev.classes(), z_prev.height(), z_prev.width(), out)?,
        clamped,
    })
}
