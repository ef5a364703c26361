//! Encoder–decoder networks: the U-Net reconstructor and the skip-free
//! auto-encoder denoiser.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{checkpoint, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::ProbField;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Downsampling {
    StridedConv,
    MaxPool,
}

impl Downsampling {
    fn code(self) -> f64 {
        match self {
            Downsampling::StridedConv => 0.0,
            Downsampling::MaxPool => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub levels: usize,
    pub base_features: usize,
    pub max_features: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    pub skip_connections: bool,
    pub downsampling: Downsampling,
    /// Convolution + norm + activation blocks per resolution level.
    pub convs_per_level: usize,
    /// Channel dropout probability applied after each encoder level while training.
    pub dropout: f64,
}

impl NetConfig {
    /// Desk-scale reconstructor: 4 levels, 8 → 64 features.
    pub fn reconstructor(in_channels: usize, n_classes: usize) -> Self {
        Self {
            levels: 4,
            base_features: 8,
            max_features: 64,
            in_channels,
            n_classes,
            skip_connections: true,
            downsampling: Downsampling::StridedConv,
            convs_per_level: 2,
            dropout: 0.05,
        }
    }

    /// Desk-scale denoiser: probability field in, probability field out.
    pub fn denoiser(n_classes: usize) -> Self {
        Self {
            in_channels: n_classes,
            skip_connections: false,
            dropout: 0.0,
            ..Self::reconstructor(n_classes, n_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.levels < 2 {
            return bad("levels must be at least 2");
        }
        if self.base_features < 1 || self.max_features < self.base_features {
            return bad("need 1 <= base_features <= max_features");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.in_channels < 1 || self.convs_per_level < 1 {
            return bad("in_channels and convs_per_level must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Channel count at each level: `min(base * 2^(k-1), cap)`.
    pub fn features(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|k| {
                self.base_features
                    .checked_shl(k as u32)
                    .unwrap_or(usize::MAX)
                    .min(self.max_features)
            })
            .collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = shape[..] else {
            return Err(Error::Shape(format!("network input must be C×H×W, got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(Error::Shape(format!("expected {} input channels, got {c}", self.in_channels)));
        }
        let div = 1usize << (self.levels - 1);
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::NotPoolable(format!("{h}×{w} with {} levels needs multiples of {div}", self.levels)));
        }
        Ok(())
    }

    /// Parameter names and shapes in construction order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let f = self.features();
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let mut prev = self.in_channels;
        for (k, &fk) in f.iter().enumerate() {
            for i in 0..self.convs_per_level {
                let cin = if i == 0 { prev } else { fk };
                conv(&mut out, format!("enc{}.conv{}", k + 1, i + 1), cin, fk, 3);
            }
            prev = fk;
        }
        for k in (0..self.levels - 1).rev() {
            let (fk, fup) = (f[k], f[k + 1]);
            match self.downsampling {
                Downsampling::StridedConv => {
                    out.push((format!("dec{}.up.weight", k + 1), vec![fup, fk, 2, 2]));
                    out.push((format!("dec{}.up.bias", k + 1), vec![fk]));
                }
                Downsampling::MaxPool => conv(&mut out, format!("dec{}.up", k + 1), fup, fk, 1),
            }
            for i in 0..self.convs_per_level {
                let cin = match (i, self.skip_connections) {
                    (0, true) => 2 * fk,
                    _ => fk,
                };
                conv(&mut out, format!("dec{}.conv{}", k + 1, i + 1), cin, fk, 3);
            }
        }
        conv(&mut out, "head".to_string(), f[0], self.n_classes, 1);
        out
    }

    fn meta_entries(&self) -> Vec<(String, Tensor)> {
        let s = |v: usize| Tensor::scalar(v as f64);
        vec![
            ("meta/net/levels".into(), s(self.levels)),
            ("meta/net/base_features".into(), s(self.base_features)),
            ("meta/net/max_features".into(), s(self.max_features)),
            ("meta/net/in_channels".into(), s(self.in_channels)),
            ("meta/net/n_classes".into(), s(self.n_classes)),
            ("meta/net/skip_connections".into(), s(self.skip_connections as usize)),
            ("meta/net/downsampling".into(), Tensor::scalar(self.downsampling.code())),
            ("meta/net/convs_per_level".into(), s(self.convs_per_level)),
            ("meta/net/dropout".into(), Tensor::scalar(self.dropout)),
        ]
    }

    fn from_meta(meta: &HashMap<&str, f64>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(format!("meta/net/{k}").as_str())
                .copied()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks meta/net/{k}")))
        };
        let cfg = Self {
            levels: get("levels")? as usize,
            base_features: get("base_features")? as usize,
            max_features: get("max_features")? as usize,
            in_channels: get("in_channels")? as usize,
            n_classes: get("n_classes")? as usize,
            skip_connections: get("skip_connections")? != 0.0,
            downsampling: if get("downsampling")? == 0.0 {
                Downsampling::StridedConv
            } else {
                Downsampling::MaxPool
            },
            convs_per_level: get("convs_per_level")? as usize,
            dropout: get("dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Network weights in a fixed construction order, tied to their config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: NetConfig,
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn from_entries(config: NetConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != entries.len()
            || layout
                .iter()
                .zip(&entries)
                .any(|((n1, s1), (n2, t))| n1 != n2 || s1 != t.shape())
        {
            return Err(Error::Incongruent("entries do not match the network layout".into()));
        }
        Ok(Self { config, entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a graph leaf, named `prefix + name`.
    pub fn bind(&self, g: &mut Graph, prefix: &str, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let name = format!("{prefix}{n}");
                if trainable {
                    g.param(&name, t.clone())
                } else {
                    g.input(&name, t.clone())
                }
            })
            .collect();
        BoundParams {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars,
        }
    }

    /// Checkpoint entries: network meta scalars followed by the weights.
    pub fn to_checkpoint_entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .config
            .meta_entries()
            .into_iter()
            .map(|(n, t)| (format!("{prefix}{n}"), t))
            .collect();
        out.extend(self.entries.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
        out
    }

    pub fn from_checkpoint_entries(entries: &[(String, Tensor)], prefix: &str) -> Result<Self> {
        let mut meta = HashMap::new();
        let mut weights = Vec::new();
        for (n, t) in entries {
            let Some(rest) = n.strip_prefix(prefix) else { continue };
            if rest.starts_with("meta/net/") {
                meta.insert(rest, t.item());
            } else if !rest.starts_with("meta/") && !rest.contains('/') {
                weights.push((rest.to_string(), t.clone()));
            }
        }
        let config = NetConfig::from_meta(&meta)?;
        Self::from_entries(config, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint_entries(""))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_entries(&checkpoint::load(path)?, "")
    }
}

/// Graph variables for a bound [`ModelParams`], aligned with its entries.
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Looks up leaves already on a graph, e.g. those created by
    /// [`Graph::eval`], by `prefix + name` for every entry of `params`.
    pub fn from_named(params: &ModelParams, named: &HashMap<String, Var>, prefix: &str) -> Result<Self> {
        let names: Vec<String> = params.entries.iter().map(|(n, _)| n.clone()).collect();
        let vars = names
            .iter()
            .map(|n| {
                named
                    .get(&format!("{prefix}{n}"))
                    .copied()
                    .ok_or_else(|| Error::Incongruent(format!("no graph leaf for parameter {prefix}{n}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { names, vars })
    }

    fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"));
        self.vars[i]
    }
}

fn init_params(cfg: &NetConfig, rng: &mut impl Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let entries = cfg
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                // fan-in: Cin·k·k for convolutions, Cin for the 2×2/2 transposed conv
                let fan_in = if name.contains(".up.") && cfg.downsampling == Downsampling::StridedConv {
                    shape[0]
                } else {
                    shape[1] * shape[2] * shape[3]
                };
                let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive std");
                let n = shape.iter().product();
                Tensor::new(&shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("layout shape")
            };
            (name, t)
        })
        .collect();
    ModelParams::from_entries(cfg.clone(), entries)
}

pub fn build_reconstructor(cfg: &NetConfig, rng: &mut impl Rng) -> Result<ModelParams> {
    if !cfg.skip_connections {
        return Err(Error::Config("reconstructor requires skip connections".into()));
    }
    init_params(cfg, rng)
}

pub fn build_denoiser(cfg: &NetConfig, rng: &mut impl Rng) -> Result<ModelParams> {
    if cfg.skip_connections {
        return Err(Error::Config("denoiser must not use skip connections".into()));
    }
    if cfg.in_channels != cfg.n_classes {
        return Err(Error::Config("denoiser maps n_classes channels to n_classes channels".into()));
    }
    init_params(cfg, rng)
}

/// Training-time stochasticity. `None` evaluates deterministically.
pub type Dropout<'a> = Option<&'a mut dyn rand::RngCore>;

fn block(g: &mut Graph, p: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"));
    let b = p.var(&format!("{name}.bias"));
    let y = g.conv2d(x, w, b, stride, 1)?;
    let y = g.instance_norm(y, NORM_EPS)?;
    g.leaky_relu(y, LEAKY_SLOPE)
}

fn channel_dropout(g: &mut Graph, x: Var, p: f64, rng: &mut dyn rand::RngCore) -> Result<Var> {
    let c = g.shape(x)[0];
    let keep = 1.0 - p;
    let factors = (0..c)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect();
    g.channel_scale(x, factors)
}

/// Builds the forward pass on `g` and returns the softmax output variable.
pub fn forward_graph(cfg: &NetConfig, g: &mut Graph, p: &BoundParams, x: Var, mut dropout: Dropout<'_>) -> Result<Var> {
    cfg.check_input(g.shape(x))?;
    let mut skips = Vec::with_capacity(cfg.levels);
    let mut pools = Vec::with_capacity(cfg.levels);
    let mut h = x;
    for k in 0..cfg.levels {
        for i in 0..cfg.convs_per_level {
            let name = format!("enc{}.conv{}", k + 1, i + 1);
            let stride = if k > 0 && i == 0 && cfg.downsampling == Downsampling::StridedConv {
                2
            } else {
                1
            };
            h = block(g, p, &name, h, stride)?;
        }
        if let Some(rng) = dropout.as_deref_mut() {
            if cfg.dropout > 0.0 {
                h = channel_dropout(g, h, cfg.dropout, rng)?;
            }
        }
        skips.push(h);
        if k + 1 < cfg.levels && cfg.downsampling == Downsampling::MaxPool {
            h = g.max_pool2(h)?;
            pools.push(h);
        }
    }
    for k in (0..cfg.levels - 1).rev() {
        let up_w = p.var(&format!("dec{}.up.weight", k + 1));
        let up_b = p.var(&format!("dec{}.up.bias", k + 1));
        h = match cfg.downsampling {
            Downsampling::StridedConv => g.conv_transpose2x2(h, up_w, up_b)?,
            Downsampling::MaxPool => {
                let proj = g.conv2d(h, up_w, up_b, 1, 0)?;
                g.max_unpool2(proj, pools[k])?
            }
        };
        if cfg.skip_connections {
            h = g.concat(&[h, skips[k]])?;
        }
        for i in 0..cfg.convs_per_level {
            h = block(g, p, &format!("dec{}.conv{}", k + 1, i + 1), h, 1)?;
        }
    }
    let logits = g.conv2d(h, p.var("head.weight"), p.var("head.bias"), 1, 0)?;
    g.softmax_channels(logits)
}

/// Deterministic inference.
pub fn forward(params: &ModelParams, image: &Tensor) -> Result<ProbField> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, "", false);
    let x = g.input("input", image.clone());
    let y = forward_graph(&params.config, &mut g, &bound, x, None)?;
    ProbField::from_tensor(g.value(y).clone())
}
