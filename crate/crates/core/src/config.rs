//! Experiment configuration: a TOML file with one section per concern.
//!
//! A config file only needs the keys it changes; everything else comes from
//! [`ExperimentConfig::default`]. Every run writes the fully resolved config
//! next to its outputs, and that file reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::nets::{ModelParams, NetConfig};
use crate::spatial::DenoiserSpec;
use crate::trainer::{DenoiserTrainConfig, SupervisionMode, TrainConfig};

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory read by training and evaluation.
    pub dir: PathBuf,
    pub seed: u64,
    pub spec: DatasetSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    Identity,
    Gaussian,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    /// Gaussian width and half-size in pixels.
    pub sigma: f64,
    pub radius: usize,
    /// Weights of a learned denoiser, as written by `train-denoiser`.
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub net: NetConfig,
    pub train: DenoiserTrainConfig,
}

impl DenoiserConfig {
    /// The denoiser to train with. Learned weights are loaded from disk.
    pub fn load_spec(&self) -> Result<DenoiserSpec> {
        Ok(match self.kind {
            DenoiserKind::Identity => DenoiserSpec::Identity,
            DenoiserKind::Gaussian => {
                if self.sigma <= 0.0 {
                    return Err(Error::Config(format!("denoiser sigma = {} must be positive", self.sigma)));
                }
                DenoiserSpec::Gaussian {
                    sigma: self.sigma,
                    radius: self.radius,
                }
            }
            DenoiserKind::Learned => {
                let p = ModelParams::load(&self.checkpoint).map_err(|e| match e {
                    Error::Io(io) => Error::Data(format!("denoiser checkpoint {}: {io}", self.checkpoint.display())),
                    other => other,
                })?;
                DenoiserSpec::Learned(Box::new(p))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Model checkpoint; empty means `<out>/model.sudt`.
    pub model: PathBuf,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Beta,
    AlphaConst,
    LambdaMax,
    Mode,
    DenoiserLabels,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::AlphaConst => "alpha-const",
            SweepAxis::LambdaMax => "lambda-max",
            SweepAxis::Mode => "mode",
            SweepAxis::DenoiserLabels => "denoiser-labels",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            SweepAxis::Beta,
            SweepAxis::AlphaConst,
            SweepAxis::LambdaMax,
            SweepAxis::Mode,
            SweepAxis::DenoiserLabels,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    /// Axis values as text; numbers for every axis except `mode`.
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    /// Also regenerate the dataset per seed (in memory, from `data.spec`).
    pub vary_data: bool,
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    /// Ring length of the circulant smoother.
    pub size: usize,
    pub taps: usize,
    pub sigma: f64,
    pub betas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub data: DataConfig,
    pub reconstructor: NetConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub spectrum: SpectrumConfig,
}

/// Reconstructor used by the desk experiments: 4 levels, 4 → 32 features.
pub fn desk_reconstructor(n_classes: usize) -> NetConfig {
    NetConfig {
        base_features: 4,
        max_features: 32,
        ..NetConfig::reconstructor(1, n_classes)
    }
}

/// Denoiser paired with [`desk_reconstructor`]: the default 4-level, 8 → 64 auto-encoder.
pub fn desk_denoiser(n_classes: usize) -> NetConfig {
    NetConfig::denoiser(n_classes)
}

/// Sud-stored for 20k steps with a checkpoint every 5k. The learning rate is
/// raised to 1e-3: with a single labeled image and these small nets, 1e-4
/// leaves every mode under-trained at 20k steps.
pub fn desk_train() -> TrainConfig {
    let mut t = TrainConfig::new(SupervisionMode::SudStored, 20_000);
    t.optimizer.learning_rate = 1e-3;
    t.checkpoint_every = 5000;
    t
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let classes = 3;
        Self {
            out: PathBuf::from("runs/default"),
            data: DataConfig {
                dir: PathBuf::from("data"),
                seed: 0,
                spec: DatasetSpec::desk(classes),
            },
            reconstructor: desk_reconstructor(classes),
            denoiser: DenoiserConfig {
                kind: DenoiserKind::Gaussian,
                sigma: 1.5,
                radius: 3,
                checkpoint: PathBuf::from("runs/denoiser/denoiser.sudt"),
                seed: 0,
                net: desk_denoiser(classes),
                train: DenoiserTrainConfig::default(),
            },
            train: desk_train(),
            eval: EvalConfig {
                model: PathBuf::new(),
                split: Split::Test,
            },
            sweep: SweepConfig {
                axis: SweepAxis::Beta,
                values: ["0", "0.01", "0.05", "0.2", "0.5"].map(String::from).to_vec(),
                seeds: (0..5).collect(),
                vary_data: false,
                parallel: false,
            },
            spectrum: SpectrumConfig {
                size: 64,
                taps: 7,
                sigma: 1.0,
                betas: vec![0.05, 0.125, 0.5, 1.0],
            },
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` as overrides on top of the defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.reconstructor.validate()?;
        self.denoiser.net.validate()?;
        self.data.spec.scene.validate()?;
        self.train.validate()?;
        let c = self.data.spec.scene.n_classes;
        if self.reconstructor.n_classes != c || self.denoiser.net.n_classes != c || self.denoiser.net.in_channels != c {
            return Err(Error::Config(format!("networks must match the dataset's {c} classes")));
        }
        if self.reconstructor.in_channels != 1 {
            return Err(Error::Config("the reconstructor reads single-channel images".into()));
        }
        Ok(())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG), self.to_toml())?;
        Ok(())
    }

    pub fn model_path(&self) -> PathBuf {
        if self.eval.model.as_os_str().is_empty() {
            self.out.join("model.sudt")
        } else {
            self.eval.model.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::AlphaCurve;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let c = ExperimentConfig::from_toml(
            "out = \"x\"\n[train]\nmode = \"temporal-ensembling\"\nbeta = 0.2\n[train.schedule]\nalpha_curve = { kind = \"constant\", value = 0.6 }\n",
        )
        .unwrap();
        assert_eq!(c.train.mode, SupervisionMode::TemporalEnsembling);
        assert_eq!(c.train.beta, 0.2);
        assert_eq!(c.train.schedule.alpha_curve, AlphaCurve::Constant(0.6));
        assert_eq!(c.train.schedule.total_steps, 20_000);
        assert_eq!(c.reconstructor, ExperimentConfig::default().reconstructor);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unusual_floats_round_trip() {
        let mut c = ExperimentConfig::default();
        c.train.beta = 0.1 + 0.2;
        c.train.optimizer.learning_rate = 3.3e-5;
        c.denoiser.sigma = std::f64::consts::PI;
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "[train]\nmode = \"nope\"\n",
            "[train]\nbogus = 1\n",
            "[reconstructor]\nn_classes = 5\n",
            "[train]\nbeta = 2.0\n",
            "not toml at all [",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn sweep_axis_names() {
        for a in ["beta", "alpha-const", "lambda-max", "mode", "denoiser-labels"] {
            assert_eq!(SweepAxis::parse(a).unwrap().name(), a);
        }
        assert!(SweepAxis::parse("gamma").is_err());
    }
}
