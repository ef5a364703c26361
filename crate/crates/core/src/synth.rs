//! Synthetic data: label corruption for denoiser training, procedural shape
//! scenes and augmentation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_channels_inplace, Tensor};
use crate::error::{Error, Result};
use crate::losses::{LabelMap, ProbField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionParams {
    pub sigma: f64,
    /// Noise is drawn on a grid `scale` times coarser than the label.
    pub scale: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl CorruptionParams {
    pub fn new(sigma: f64, scale: usize) -> Self {
        Self {
            sigma,
            scale,
            clip_lo: -3.0,
            clip_hi: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::OutOfRange(format!("noise sigma = {}", self.sigma)));
        }
        if self.scale < 1 {
            return Err(Error::OutOfRange("noise scale must be at least 1".into()));
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::OutOfRange(format!("clip range [{}, {}]", self.clip_lo, self.clip_hi)));
        }
        Ok(())
    }
}

/// Ranges `(σ, ς)` are drawn from, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionRanges {
    pub sigma: (f64, f64),
    pub scale: (usize, usize),
}

impl Default for CorruptionRanges {
    fn default() -> Self {
        Self {
            sigma: (0.0, 8.0),
            scale: (1, 8),
        }
    }
}

impl CorruptionRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<CorruptionParams> {
        let (s0, s1) = self.sigma;
        let (c0, c1) = self.scale;
        if s0 > s1 || c0 > c1 || c0 < 1 || s0 < 0.0 {
            return Err(Error::OutOfRange(format!("corruption ranges {self:?}")));
        }
        let sigma = if s0 == s1 { s0 } else { rng.random_range(s0..=s1) };
        Ok(CorruptionParams::new(sigma, rng.random_range(c0..=c1)))
    }
}

/// `h×w` field of standard normals drawn on a grid coarser by `scale`, then
/// bilinearly upsampled (half-pixel centres, edge clamped).
pub fn smooth_noise(h: usize, w: usize, scale: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (gh, gw) = (h.div_ceil(scale), w.div_ceil(scale));
    let coarse: Vec<f64> = (0..gh * gw).map(|_| rng.sample(StandardNormal)).collect();
    if scale == 1 {
        return coarse;
    }
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1, fy) = coord(y, gh);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, gw);
            let top = coarse[y0 * gw + x0] * (1.0 - fx) + coarse[y0 * gw + x1] * fx;
            let bot = coarse[y1 * gw + x0] * (1.0 - fx) + coarse[y1 * gw + x1] * fx;
            out[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Clipped log one-hot plus spatially correlated Gaussian noise, softmaxed.
pub fn corrupt_labels(y: &LabelMap, p: &CorruptionParams, rng: &mut impl Rng) -> Result<ProbField> {
    p.validate()?;
    let (c, h, w) = (y.n_classes(), y.height(), y.width());
    if p.scale > h.min(w) {
        return Err(Error::OutOfRange(format!("noise scale {} exceeds {h}x{w} canvas", p.scale)));
    }
    let n = h * w;
    let mut logits = vec![p.clip_lo; c * n];
    for (px, &cls) in y.data().iter().enumerate() {
        logits[cls as usize * n + px] = p.clip_hi;
    }
    if p.sigma > 0.0 {
        for k in 0..c {
            let noise = smooth_noise(h, w, p.scale, rng);
            for (v, e) in logits[k * n..(k + 1) * n].iter_mut().zip(noise) {
                *v += p.sigma * e;
            }
        }
    }
    softmax_channels_inplace(&mut logits, c, n);
    ProbField::new(c, h, w, logits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Ellipse,
    Polygon,
    Annulus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSceneConfig {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Shapes drawn per foreground class, inclusive range.
    pub shapes_per_class: (usize, usize),
    /// Shape radius in pixels, inclusive range.
    pub radius: (f64, f64),
    /// Shape kind per foreground class, cycled when shorter than the class list.
    pub kinds: Vec<ShapeKind>,
    /// Mean intensity per class, background first.
    pub class_means: Vec<f64>,
    pub pixel_noise: f64,
    /// Amplitude of the smooth multiplicative bias field.
    pub bias_strength: f64,
}

impl ShapeSceneConfig {
    pub fn desk(n_classes: usize) -> Self {
        let means = (0..n_classes)
            .map(|k| 0.2 + 0.6 * k as f64 / (n_classes.max(2) - 1) as f64)
            .collect();
        Self {
            height: 64,
            width: 64,
            n_classes,
            shapes_per_class: (1, 2),
            radius: (6.0, 13.0),
            kinds: vec![ShapeKind::Ellipse, ShapeKind::Annulus, ShapeKind::Polygon],
            class_means: means,
            pixel_noise: 0.1,
            bias_strength: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("empty canvas");
        }
        if self.n_classes < 2 || self.n_classes > u16::MAX as usize {
            return bad("need at least two classes");
        }
        if self.class_means.len() != self.n_classes {
            return bad("one mean intensity per class required");
        }
        if self.kinds.is_empty() {
            return bad("no shape kinds");
        }
        if self.shapes_per_class.0 > self.shapes_per_class.1 {
            return bad("shape count range reversed");
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return bad("invalid radius range");
        }
        if self.pixel_noise < 0.0 || self.bias_strength < 0.0 || self.bias_strength >= 1.0 {
            return bad("noise and bias must be non-negative, bias below 1");
        }
        Ok(())
    }
}

enum Shape {
    Ellipse { cy: f64, cx: f64, a: f64, b: f64, cos: f64, sin: f64 },
    Annulus { cy: f64, cx: f64, outer: f64, inner: f64 },
    Polygon { verts: Vec<(f64, f64)> },
}

impl Shape {
    fn random(kind: ShapeKind, cfg: &ShapeSceneConfig, rng: &mut impl Rng) -> Self {
        let r = rng.random_range(cfg.radius.0..=cfg.radius.1);
        let margin_y = r.min(cfg.height as f64 / 2.0);
        let margin_x = r.min(cfg.width as f64 / 2.0);
        let cy = rng.random_range(margin_y..=cfg.height as f64 - margin_y);
        let cx = rng.random_range(margin_x..=cfg.width as f64 - margin_x);
        match kind {
            ShapeKind::Ellipse => {
                let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Shape::Ellipse {
                    cy,
                    cx,
                    a: r,
                    b: r * rng.random_range(0.45..=1.0),
                    cos: t.cos(),
                    sin: t.sin(),
                }
            }
            ShapeKind::Annulus => Shape::Annulus {
                cy,
                cx,
                outer: r,
                inner: r * rng.random_range(0.35..=0.6),
            },
            ShapeKind::Polygon => {
                let k = rng.random_range(3..=6);
                let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
                angles.sort_by(f64::total_cmp);
                let verts = angles
                    .into_iter()
                    .map(|t| {
                        let rr = r * rng.random_range(0.7..=1.0);
                        (cy + rr * t.sin(), cx + rr * t.cos())
                    })
                    .collect();
                Shape::Polygon { verts }
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, a, b, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Annulus { cy, cx, outer, inner } => {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                d2 <= outer * outer && d2 >= inner * inner
            }
            Shape::Polygon { verts } => {
                let mut inside = false;
                let n = verts.len();
                for i in 0..n {
                    let (yi, xi) = verts[i];
                    let (yj, xj) = verts[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

/// Random scene: shapes rasterized back to front into a label map, plus an
/// intensity image `[1, H, W]` quantized to the 16-bit grid in `[0, 1]`.
pub fn gen_scene(cfg: &ShapeSceneConfig, rng: &mut impl Rng) -> Result<(Tensor, LabelMap)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut shapes = Vec::new();
    for class in 1..cfg.n_classes {
        let kind = cfg.kinds[(class - 1) % cfg.kinds.len()];
        let count = rng.random_range(cfg.shapes_per_class.0..=cfg.shapes_per_class.1);
        for _ in 0..count {
            shapes.push((class as u16, Shape::random(kind, cfg, rng)));
        }
    }
    shapes.shuffle(rng);
    let mut label = LabelMap::filled(h, w, cfg.n_classes, 0);
    for (class, s) in &shapes {
        for y in 0..h {
            for x in 0..w {
                if s.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    label.set(y, x, *class);
                }
            }
        }
    }

    // low-frequency bias: two random plane waves, normalized to [-1, 1]
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.5..1.5) * std::f64::consts::TAU / h.max(w) as f64;
            (freq * t.cos(), freq * t.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut image = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let b: f64 = waves.iter().map(|(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).cos()).sum::<f64>() / 2.0;
            let noise: f64 = rng.sample(StandardNormal);
            let v = (cfg.class_means[label.get(y, x) as usize] + cfg.pixel_noise * noise) * (1.0 + cfg.bias_strength * b);
            image[y * w + x] = quantize16(v);
        }
    }
    Ok((Tensor::new(&[1, h, w], image)?, label))
}

/// Clamps to `[0, 1]` and rounds to the nearest multiple of `1/65535`.
pub fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentOptions {
    /// Probability of flipping along each axis independently.
    pub flip: f64,
    pub intensity_scale: f64,
    pub intensity_range: (f64, f64),
    pub noise: f64,
    pub noise_max_std: f64,
    pub elastic: f64,
    /// Control grid size of the elastic field.
    pub elastic_grid: usize,
    pub elastic_max_shift: f64,
}

impl AugmentOptions {
    pub fn none() -> Self {
        Self {
            flip: 0.0,
            intensity_scale: 0.0,
            intensity_range: (0.75, 1.25),
            noise: 0.0,
            noise_max_std: 0.1,
            elastic: 0.0,
            elastic_grid: 16,
            elastic_max_shift: 4.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            flip: 0.5,
            intensity_scale: 0.15,
            noise: 0.1,
            elastic: 0.2,
            ..Self::none()
        }
    }
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self::desk()
    }
}

/// Geometric resampling shared by image and label.
#[derive(Clone, Debug, PartialEq)]
pub struct Warp {
    pub height: usize,
    pub width: usize,
    pub flip_y: bool,
    pub flip_x: bool,
    /// Per-pixel `(dy, dx)` displacement; empty means none.
    pub displacement: Vec<(f64, f64)>,
}

impl Warp {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            flip_y: false,
            flip_x: false,
            displacement: Vec::new(),
        }
    }

    /// Random displacement on a `grid×grid` lattice, bilinearly interpolated.
    pub fn elastic(height: usize, width: usize, grid: usize, max_shift: f64, rng: &mut impl Rng) -> Self {
        let g = grid.max(2);
        let ctrl: Vec<(f64, f64)> = (0..g * g)
            .map(|_| {
                (
                    rng.random_range(-max_shift..=max_shift),
                    rng.random_range(-max_shift..=max_shift),
                )
            })
            .collect();
        Self::from_control_grid(height, width, g, &ctrl)
    }

    pub fn from_control_grid(height: usize, width: usize, grid: usize, ctrl: &[(f64, f64)]) -> Self {
        let lerp_idx = |i: usize, n: usize| -> (usize, usize, f64) {
            let s = if n > 1 {
                i as f64 * (grid - 1) as f64 / (n - 1) as f64
            } else {
                0.0
            };
            let i0 = (s.floor() as usize).min(grid - 1);
            let i1 = (i0 + 1).min(grid - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut displacement = Vec::with_capacity(height * width);
        for y in 0..height {
            let (y0, y1, fy) = lerp_idx(y, height);
            for x in 0..width {
                let (x0, x1, fx) = lerp_idx(x, width);
                let at = |a: usize, b: usize| ctrl[a * grid + b];
                let mix = |p: (f64, f64), q: (f64, f64), t: f64| (p.0 * (1.0 - t) + q.0 * t, p.1 * (1.0 - t) + q.1 * t);
                let top = mix(at(y0, x0), at(y0, x1), fx);
                let bot = mix(at(y1, x0), at(y1, x1), fx);
                displacement.push(mix(top, bot, fy));
            }
        }
        Self {
            height,
            width,
            flip_y: false,
            flip_x: false,
            displacement,
        }
    }

    /// Source coordinate for output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let (mut sy, mut sx) = (y as f64, x as f64);
        if let Some(&(dy, dx)) = self.displacement.get(y * self.width + x) {
            sy += dy;
            sx += dx;
        }
        sy = sy.clamp(0.0, (self.height - 1) as f64);
        sx = sx.clamp(0.0, (self.width - 1) as f64);
        if self.flip_y {
            sy = (self.height - 1) as f64 - sy;
        }
        if self.flip_x {
            sx = (self.width - 1) as f64 - sx;
        }
        (sy, sx)
    }

    pub fn apply_bilinear(&self, src: &[f64]) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
        out
    }

    pub fn apply_nearest<T: Copy>(&self, src: &[T]) -> Vec<T> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x);
                let (ny, nx) = ((sy.round() as usize).min(h - 1), (sx.round() as usize).min(w - 1));
                out.push(src[ny * w + nx]);
            }
        }
        out
    }
}

/// Intensity scaling and additive noise, image only.
pub fn augment_photometric(image: &Tensor, rng: &mut impl Rng, opts: &AugmentOptions) -> Tensor {
    let mut out = image.clone();
    if opts.intensity_scale > 0.0 && rng.random::<f64>() < opts.intensity_scale {
        let s = rng.random_range(opts.intensity_range.0..=opts.intensity_range.1);
        out.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    if opts.noise > 0.0 && rng.random::<f64>() < opts.noise {
        let std = rng.random_range(0.0..=opts.noise_max_std);
        for v in out.data_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// Random geometric transform for an `h×w` canvas.
pub fn random_warp(h: usize, w: usize, rng: &mut impl Rng, opts: &AugmentOptions) -> Warp {
    let mut warp = if opts.elastic > 0.0 && rng.random::<f64>() < opts.elastic {
        Warp::elastic(h, w, opts.elastic_grid, opts.elastic_max_shift, rng)
    } else {
        Warp::identity(h, w)
    };
    if opts.flip > 0.0 {
        warp.flip_y = rng.random::<f64>() < opts.flip;
        warp.flip_x = rng.random::<f64>() < opts.flip;
    }
    warp
}

/// Same geometric transform on image (bilinear) and label (nearest), then
/// photometric changes on the image.
pub fn augment(image: &Tensor, label: &LabelMap, rng: &mut impl Rng, opts: &AugmentOptions) -> Result<(Tensor, LabelMap)> {
    let (h, w) = (label.height(), label.width());
    if !image.len().is_multiple_of(h * w) {
        return Err(Error::Shape(format!("image {:?} vs label {h}x{w}", image.shape())));
    }
    let warp = random_warp(h, w, rng, opts);
    let warped: Vec<f64> = image.data().chunks_exact(h * w).flat_map(|ch| warp.apply_bilinear(ch)).collect();
    let new_label = LabelMap::new(h, w, label.n_classes(), warp.apply_nearest(label.data()))?;
    let warped = Tensor::new(image.shape(), warped)?;
    Ok((augment_photometric(&warped, rng, opts), new_label))
}

/// Noisy/clean pairs for denoiser training: labels sampled with replacement,
/// each corrupted with freshly drawn `(σ, ς)`.
pub fn make_denoiser_dataset(
    labels: &[LabelMap],
    ranges: &CorruptionRanges,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(ProbField, LabelMap)>> {
    if labels.is_empty() {
        return Err(Error::Data("no source labels for the denoiser dataset".into()));
    }
    (0..count)
        .map(|_| {
            let y = &labels[rng.random_range(0..labels.len())];
            let p = ranges.sample(rng)?;
            Ok((corrupt_labels(y, &p, rng)?, y.clone()))
        })
        .collect()
}
