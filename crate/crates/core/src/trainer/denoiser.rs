//! Pretraining the learned denoiser on synthetically corrupted labels.

use serde::{Deserialize, Serialize};

use super::{median_of, Adam, AdamConfig};
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{loss_graph, mean_dice, DiceOptions, LabelMap, LossKind, ProbField};
use crate::nets::{self, build_denoiser, forward_graph, ModelParams, NetConfig};
use crate::seeds::derive_rng;
use crate::synth::{corrupt_labels, make_denoiser_dataset, random_warp, AugmentOptions, CorruptionRanges};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub loss: LossKind,
    pub optimizer: AdamConfig,
    pub corruption: CorruptionRanges,
    /// Use only the first `source_labels` training labels; 0 uses all.
    pub source_labels: usize,
    /// Fixed corrupted examples drawn from the held-out labels.
    pub val_examples: usize,
    /// Steps between validations; 0 validates only at the end.
    pub val_every: usize,
    /// Geometric augmentation of each source label before corruption.
    pub label_augment: AugmentOptions,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            loss: LossKind::Dice,
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            corruption: CorruptionRanges::default(),
            source_labels: 0,
            val_examples: 40,
            val_every: 500,
            label_augment: AugmentOptions {
                flip: 0.5,
                elastic: 1.0,
                ..AugmentOptions::none()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_mean_dice: f64,
    pub val_median_dice: f64,
}

pub const DENOISER_LOG_HEADER: &str = "step,train_loss,val_mean_dice,val_median_dice";

pub fn denoiser_log_csv(rows: &[DenoiserLogRow]) -> String {
    let mut s = format!("{DENOISER_LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            r.step, r.train_loss, r.val_mean_dice, r.val_median_dice
        ));
    }
    s
}

/// Mean and median hard Dice of the denoised fields against the clean labels.
pub fn evaluate_denoiser(params: &ModelParams, pairs: &[(ProbField, LabelMap)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Data("denoiser validation set is empty".into()));
    }
    let dice = pairs
        .iter()
        .map(|(z, y)| {
            let pred = nets::forward(params, z.as_tensor())?.argmax();
            Ok(mean_dice(&pred, y, y.n_classes())?.mean)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((dice.iter().sum::<f64>() / dice.len() as f64, median_of(&dice)))
}

/// Trains a denoiser from `net`'s initialization. Each step corrupts one
/// training label afresh; validation uses a fixed set of corruptions of
/// `val_labels`.
pub fn train_denoiser(
    cfg: &DenoiserTrainConfig,
    net: &NetConfig,
    train_labels: &[LabelMap],
    val_labels: &[LabelMap],
    seed: u64,
) -> Result<(ModelParams, Vec<DenoiserLogRow>)> {
    let labels = if cfg.source_labels == 0 {
        train_labels
    } else if cfg.source_labels <= train_labels.len() {
        &train_labels[..cfg.source_labels]
    } else {
        return Err(Error::Data(format!(
            "{} source labels requested, {} available",
            cfg.source_labels,
            train_labels.len()
        )));
    };
    if labels.is_empty() {
        return Err(Error::Data("no labels to train the denoiser on".into()));
    }
    let mut params = build_denoiser(net, &mut derive_rng(seed, &[0]))?;
    let val = if val_labels.is_empty() || cfg.val_examples == 0 {
        Vec::new()
    } else {
        make_denoiser_dataset(val_labels, &cfg.corruption, cfg.val_examples, &mut derive_rng(seed, &[1]))?
    };
    let mut adam = Adam::new(&params);
    let mut log = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 0..cfg.steps {
        let mut rng = derive_rng(seed, &[2, step as u64]);
        let src = &labels[step % labels.len()];
        let warp = random_warp(src.height(), src.width(), &mut rng, &cfg.label_augment);
        let y = &LabelMap::new(src.height(), src.width(), src.n_classes(), warp.apply_nearest(src.data()))?;
        let p = cfg.corruption.sample(&mut rng)?;
        let z = corrupt_labels(y, &p, &mut rng)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, "", true);
        let x = g.input("z", z.into_tensor());
        let out = forward_graph(&params.config, &mut g, &bound, x, None)?;
        let loss = loss_graph(cfg.loss, &mut g, &ProbField::one_hot(y), out, DiceOptions::default())?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite denoiser loss".into(),
            });
        }
        let grads = g.backward(loss, None)?;
        let grads: Vec<Tensor> = bound
            .vars()
            .iter()
            .map(|&v| grads.get(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        adam.step(&cfg.optimizer, &mut params, &grads)?;
        loss_sum += value;
        loss_n += 1;
        let done = step + 1;
        let validate = done == cfg.steps || (cfg.val_every > 0 && done % cfg.val_every == 0);
        if validate && !val.is_empty() {
            let (mean, median) = evaluate_denoiser(&params, &val)?;
            log.push(DenoiserLogRow {
                step: done,
                train_loss: loss_sum / loss_n as f64,
                val_mean_dice: mean,
                val_median_dice: median,
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_scene, ShapeSceneConfig};

    fn labels(n: usize) -> Vec<LabelMap> {
        let scene = ShapeSceneConfig {
            height: 16,
            width: 16,
            radius: (3.0, 6.0),
            ..ShapeSceneConfig::desk(3)
        };
        let mut rng = derive_rng(5, &[]);
        (0..n).map(|_| gen_scene(&scene, &mut rng).unwrap().1).collect()
    }

    fn small_net() -> NetConfig {
        NetConfig {
            levels: 2,
            base_features: 4,
            max_features: 8,
            ..NetConfig::denoiser(3)
        }
    }

    fn small_cfg(steps: usize) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            steps,
            corruption: CorruptionRanges {
                sigma: (0.0, 4.0),
                scale: (1, 4),
            },
            val_examples: 8,
            val_every: 0,
            label_augment: AugmentOptions::none(),
            ..DenoiserTrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_keeps_the_initialization() {
        let ls = labels(3);
        let (p, log) = train_denoiser(&small_cfg(0), &small_net(), &ls, &ls, 4).unwrap();
        let init = build_denoiser(&small_net(), &mut derive_rng(4, &[0])).unwrap();
        assert_eq!(p, init);
        assert!(log.is_empty());
    }

    #[test]
    fn training_improves_validation_dice() {
        let ls = labels(6);
        let (tr, va) = ls.split_at(4);
        let (_, before) = train_denoiser(&small_cfg(1), &small_net(), tr, va, 4).unwrap();
        let (_, after) = train_denoiser(&small_cfg(150), &small_net(), tr, va, 4).unwrap();
        assert!(after[0].val_mean_dice > before[0].val_mean_dice, "{before:?} {after:?}");
    }

    #[test]
    fn too_many_source_labels_is_a_data_error() {
        let ls = labels(2);
        let mut cfg = small_cfg(1);
        cfg.source_labels = 3;
        assert!(matches!(train_denoiser(&cfg, &small_net(), &ls, &ls, 0), Err(Error::Data(_))));
    }

    #[test]
    fn log_csv_has_header() {
        let rows = [DenoiserLogRow {
            step: 1,
            train_loss: 0.5,
            val_mean_dice: 0.25,
            val_median_dice: 0.2,
        }];
        assert_eq!(denoiser_log_csv(&rows), format!("{DENOISER_LOG_HEADER}\n1,5e-1,2.5e-1,2e-1\n"));
    }
}
