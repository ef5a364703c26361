use std::collections::{BTreeMap, HashMap};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-input worst relative error between the analytic and the central
/// finite-difference gradient, `|analytic - numeric| / max(1, |numeric|)`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: BTreeMap<String, f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Compares [`Graph::backward`] against central differences for every
/// element of every named input. The built graph must be scalar-valued.
pub fn grad_check<F>(inputs: &[(&str, Tensor)], tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &HashMap<String, Var>) -> Result<Var>,
{
    let (g, out) = Graph::eval(inputs, &build)?;
    if g.value(out).len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar output, got {:?}",
            g.shape(out)
        )));
    }
    let grads = g.backward(out, None)?;
    let analytic = grads.by_name();

    let eval_at = |inputs: &[(&str, Tensor)]| -> Result<f64> {
        let (g, out) = Graph::eval(inputs, &build)?;
        Ok(g.value(out).item())
    };

    let mut report = BTreeMap::new();
    let mut work: Vec<(&str, Tensor)> = inputs.iter().map(|(n, t)| (*n, t.clone())).collect();
    for i in 0..work.len() {
        let name = work[i].0;
        let zero = Tensor::zeros(work[i].1.shape());
        let an = analytic.get(name).unwrap_or(&zero).clone();
        let mut worst: f64 = 0.0;
        for j in 0..work[i].1.len() {
            let orig = work[i].1.data()[j];
            work[i].1.data_mut()[j] = orig + FD_STEP;
            let plus = eval_at(&work)?;
            work[i].1.data_mut()[j] = orig - FD_STEP;
            let minus = eval_at(&work)?;
            work[i].1.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (an.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        report.insert(name.to_string(), worst);
    }
    Ok(GradCheckReport {
        max_rel_error: report,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_layer_passes() {
        // 1x1 convolution over a 1x1 image is a dense layer
        let x = rand_tensor(&[5, 1, 1], 1);
        let w = rand_tensor(&[3, 5, 1, 1], 2);
        let b = rand_tensor(&[3], 3);
        let t = rand_tensor(&[3, 1, 1], 4);
        let r = grad_check(&[("x", x), ("w", w), ("b", b)], 1e-6, |g, v| {
            let y = g.conv2d(v["x"], v["w"], v["b"], 1, 0)?;
            let t = g.constant(t.clone());
            let p = g.mul(y, t)?;
            let q = g.mul(p, y)?;
            g.sum(q)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn instance_norm_passes() {
        let x = rand_tensor(&[2, 3, 4], 5);
        let t = rand_tensor(&[2, 3, 4], 6);
        let r = grad_check(&[("x", x)], 1e-5, |g, v| {
            let y = g.instance_norm(v["x"], 1e-5)?;
            let t = g.constant(t.clone());
            let p = g.mul(y, t)?;
            g.sum(p)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn empty_input_is_rejected() {
        let err = grad_check(&[("x", Tensor::zeros(&[0]))], 1e-6, |g, v| g.sum(v["x"])).unwrap_err();
        assert_eq!(err.to_string(), "empty tensor");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = rand_tensor(&[3], 1);
        assert!(grad_check(&[("x", x)], 1e-6, |g, v| g.scale(v["x"], 2.0)).is_err());
    }
}
