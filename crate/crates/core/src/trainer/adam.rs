use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, aligned with a model's entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.entries().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update; `grads` aligned with `params.entries()`.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Incongruent(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.entries_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::Incongruent(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] + cfg.weight_decay * *w;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                *w -= cfg.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_entries(&self, names: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
        let mut out = vec![("meta/adam/t".to_string(), Tensor::scalar(self.t as f64))];
        for (i, (n, _)) in names.iter().enumerate() {
            out.push((format!("adam/m/{n}"), self.m[i].clone()));
            out.push((format!("adam/v/{n}"), self.v[i].clone()));
        }
        out
    }

    pub fn from_checkpoint_entries(entries: &[(String, Tensor)], params: &ModelParams) -> Result<Self> {
        let find = |k: &str| {
            entries
                .iter()
                .find(|(n, _)| n == k)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")))
        };
        let t = find("meta/adam/t")?.item() as u64;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (n, p) in params.entries() {
            let (mi, vi) = (find(&format!("adam/m/{n}"))?, find(&format!("adam/v/{n}"))?);
            if mi.shape() != p.shape() || vi.shape() != p.shape() {
                return Err(Error::Format(format!("optimizer state for {n} has the wrong shape")));
            }
            m.push(mi);
            v.push(vi);
        }
        Ok(Self { t, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_reconstructor, NetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let cfg = NetConfig {
            levels: 2,
            base_features: 2,
            max_features: 2,
            ..NetConfig::reconstructor(1, 2)
        };
        let mut p = build_reconstructor(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = p.clone();
        let grads: Vec<Tensor> = p.entries().iter().map(|(_, t)| t.map(|_| -3.0)).collect();
        let mut adam = Adam::new(&p);
        let ac = AdamConfig::default();
        adam.step(&ac, &mut p, &grads).unwrap();
        for ((_, a), (_, b)) in p.entries().iter().zip(before.entries()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
                assert!((x - y - ac.learning_rate * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
            }
        }
        let back = Adam::from_checkpoint_entries(&adam.to_checkpoint_entries(p.entries()), &p).unwrap();
        assert_eq!(back, adam);
    }
}
