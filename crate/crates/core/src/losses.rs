//! Probability fields, label maps, training losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

/// `C×H×W` field whose per-pixel channel vector lies on the probability simplex.
///
/// Construction only checks the shape; simplex membership is a property callers
/// verify with [`ProbField::simplex_violation`] (soft targets start at zero).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbField {
    t: Tensor,
}

impl ProbField {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self {
            t: Tensor::new(&[classes, height, width], data)?,
        })
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Shape(format!("probability field must be C×H×W, got {:?}", t.shape())));
        }
        Ok(Self { t })
    }

    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        Self {
            t: Tensor::zeros(&[classes, height, width]),
        }
    }

    pub fn uniform(classes: usize, height: usize, width: usize) -> Self {
        Self {
            t: Tensor::full(&[classes, height, width], 1.0 / classes as f64),
        }
    }

    pub fn one_hot(label: &LabelMap) -> Self {
        let (h, w, c) = (label.height(), label.width(), label.n_classes());
        let p = h * w;
        let mut data = vec![0.0; c * p];
        for (i, &k) in label.data().iter().enumerate() {
            data[k as usize * p + i] = 1.0;
        }
        Self {
            t: Tensor::new(&[c, h, w], data).expect("one-hot shape"),
        }
    }

    pub fn classes(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.t.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn data(&self) -> &[f64] {
        self.t.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.t.data_mut()
    }

    pub fn channel(&self, j: usize) -> &[f64] {
        let p = self.pixels();
        &self.t.data()[j * p..(j + 1) * p]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn into_tensor(self) -> Tensor {
        self.t
    }

    pub fn same_shape(&self, other: &ProbField) -> Result<()> {
        if self.t.shape() != other.t.shape() {
            return Err(Error::Shape(format!(
                "probability fields {:?} vs {:?}",
                self.t.shape(),
                other.t.shape()
            )));
        }
        Ok(())
    }

    /// Largest deviation from the simplex over all pixels: the worst of
    /// `|sum - 1|` and the most negative entry.
    pub fn simplex_violation(&self) -> f64 {
        let (c, p) = (self.classes(), self.pixels());
        let d = self.t.data();
        let mut worst: f64 = 0.0;
        for px in 0..p {
            let mut s = 0.0;
            for k in 0..c {
                let v = d[k * p + px];
                s += v;
                worst = worst.max(-v);
            }
            worst = worst.max((s - 1.0).abs());
        }
        if d.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        worst
    }

    pub fn argmax(&self) -> LabelMap {
        let (c, p) = (self.classes(), self.pixels());
        let d = self.t.data();
        let labels = (0..p)
            .map(|px| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * p + px] > d[best * p + px] {
                        best = k;
                    }
                }
                best as u16
            })
            .collect();
        LabelMap {
            height: self.height(),
            width: self.width(),
            n_classes: c,
            data: labels,
        }
    }

    /// Pointwise combination `sum_i w_i * fields_i`, evaluated left to right.
    pub fn combine(terms: &[(f64, &ProbField)]) -> Result<ProbField> {
        let (_, first) = terms.first().ok_or(Error::EmptyTensor)?;
        for (_, f) in terms {
            first.same_shape(f)?;
        }
        let n = first.data().len();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = terms[0].0 * terms[0].1.data()[i];
            for (w, f) in &terms[1..] {
                acc += w * f.data()[i];
            }
            *o = acc;
        }
        Ok(ProbField {
            t: Tensor::new(first.t.shape(), out)?,
        })
    }
}

/// `H×W` map of class indices in `[0, n_classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    n_classes: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, n_classes: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{height}×{width} label map with {} values", data.len())));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= n_classes) {
            return Err(Error::Data(format!("class index {bad} outside [0, {n_classes})")));
        }
        Ok(Self {
            height,
            width,
            n_classes,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, n_classes: usize, class: u16) -> Self {
        Self::new(height, width, n_classes, vec![class; height * width]).expect("valid fill class")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u16) {
        debug_assert!((class as usize) < self.n_classes);
        self.data[y * self.width + x] = class;
    }

    pub fn mask(&self, class: u16) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v == class).collect(),
        }
    }

    pub fn same_shape(&self, other: &LabelMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "label maps {}×{} vs {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{height}×{width} mask with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.data[y as usize * self.width + x as usize]
    }

    /// Mask pixels with at least one 4-neighbour outside the mask (pixels
    /// beyond the image edge count as outside).
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let (yi, xi) = (y as isize, x as isize);
                if self.at(yi, xi)
                    && !(self.at(yi - 1, xi) && self.at(yi + 1, xi) && self.at(yi, xi - 1) && self.at(yi, xi + 1))
                {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Result of a loss evaluation along with the number of clamped pixels or
/// degenerate classes that had to be special-cased.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub flagged: usize,
}

/// Mean over pixels of `-log pred[target]`, with `pred` floored at 1e-12.
pub fn cross_entropy(pred: &ProbField, target: &LabelMap) -> Result<LossValue> {
    if (pred.height(), pred.width()) != (target.height(), target.width()) || pred.classes() != target.n_classes() {
        return Err(Error::Shape("cross_entropy prediction and label differ in shape".into()));
    }
    let p = pred.pixels();
    let mut flagged = 0;
    let mut total = 0.0;
    for (px, &k) in target.data().iter().enumerate() {
        let v = pred.data()[k as usize * p + px];
        if v < PROB_FLOOR {
            flagged += 1;
        }
        total -= v.max(PROB_FLOOR).ln();
    }
    Ok(LossValue {
        value: total / p as f64,
        flagged,
    })
}

/// Which classes enter the Dice loss and how they are aggregated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiceOptions {
    /// Average over classes (1/J) rather than summing.
    pub class_mean: bool,
    pub include_background: bool,
}

impl Default for DiceOptions {
    fn default() -> Self {
        Self {
            class_mean: true,
            include_background: true,
        }
    }
}

impl DiceOptions {
    fn classes(&self, c: usize) -> std::ops::Range<usize> {
        if self.include_background {
            0..c
        } else {
            1..c
        }
    }

    fn norm(&self, c: usize) -> f64 {
        if self.class_mean {
            1.0 / self.classes(c).len().max(1) as f64
        } else {
            1.0
        }
    }
}

struct ClassDice {
    inner: f64,
    norm_sum: f64,
}

fn class_terms(z: &ProbField, f: &ProbField, j: usize) -> ClassDice {
    let (zj, fj) = (z.channel(j), f.channel(j));
    let mut inner = 0.0;
    let mut zz = 0.0;
    let mut ff = 0.0;
    for (a, b) in zj.iter().zip(fj) {
        inner += a * b;
        zz += a * a;
        ff += b * b;
    }
    ClassDice {
        inner,
        norm_sum: zz + ff,
    }
}

/// Soft Dice loss `(1/J) Σ_j (1 - d_jj)` with `d_jj = 2<z_j,f_j>/(|z_j|² + |f_j|²)`.
/// A class with `|z_j|² + |f_j|² = 0` scores `d_jj = 1` and is flagged.
pub fn dice_loss(pred: &ProbField, target: &ProbField) -> Result<LossValue> {
    dice_loss_with(pred, target, DiceOptions::default())
}

pub fn dice_loss_with(pred: &ProbField, target: &ProbField, opts: DiceOptions) -> Result<LossValue> {
    pred.same_shape(target)?;
    let mut flagged = 0;
    let mut total = 0.0;
    for j in opts.classes(pred.classes()) {
        let t = class_terms(target, pred, j);
        let d = if t.norm_sum == 0.0 {
            flagged += 1;
            1.0
        } else {
            2.0 * t.inner / t.norm_sum
        };
        total += 1.0 - d;
    }
    Ok(LossValue {
        value: total * opts.norm(pred.classes()),
        flagged,
    })
}

/// Closed-form gradient of the Dice loss with respect to its first argument:
/// `(1/J) C⁻¹ (D z - f)` with `c_jj⁻¹ = 2/(|z_j|² + |f_j|²)`. Degenerate
/// classes get a zero gradient.
pub fn dice_grad(z: &ProbField, f: &ProbField) -> Result<Tensor> {
    dice_grad_with(z, f, DiceOptions::default())
}

pub fn dice_grad_with(z: &ProbField, f: &ProbField, opts: DiceOptions) -> Result<Tensor> {
    z.same_shape(f)?;
    let p = z.pixels();
    let norm = opts.norm(z.classes());
    let mut out = vec![0.0; z.data().len()];
    for j in opts.classes(z.classes()) {
        let t = class_terms(z, f, j);
        if t.norm_sum == 0.0 {
            continue;
        }
        let d = 2.0 * t.inner / t.norm_sum;
        let c_inv = 2.0 / t.norm_sum;
        for ((o, zv), fv) in out[j * p..(j + 1) * p].iter_mut().zip(z.channel(j)).zip(f.channel(j)) {
            *o = norm * c_inv * (d * zv - fv);
        }
    }
    Tensor::new(z.as_tensor().shape(), out)
}

/// Loss `D(target, prediction)` used for both supervised and self-supervised terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    Dice,
    /// `½|z - f|²`, normalized per pixel when used as a training loss.
    Quadratic,
}

/// Builds `D(target, pred)` on the graph; the target is a constant.
pub fn loss_graph(kind: LossKind, g: &mut Graph, target: &ProbField, pred: Var, dice: DiceOptions) -> Result<Var> {
    if g.shape(pred) != target.as_tensor().shape() {
        return Err(Error::Shape(format!(
            "loss target {:?} vs prediction {:?}",
            target.as_tensor().shape(),
            g.shape(pred)
        )));
    }
    let pixels = target.pixels() as f64;
    let t = g.constant(target.as_tensor().clone());
    match kind {
        LossKind::CrossEntropy => {
            let c = g.clip(pred, PROB_FLOOR, 1.0)?;
            let l = g.log(c)?;
            let m = g.mul(l, t)?;
            let s = g.sum(m)?;
            g.scale(s, -1.0 / pixels)
        }
        LossKind::Dice => {
            let c = target.classes();
            let tp = g.mul(t, pred)?;
            let inner = g.sum_spatial(tp)?;
            let tt = g.mul(t, t)?;
            let tt = g.sum_spatial(tt)?;
            let pp = g.mul(pred, pred)?;
            let pp = g.sum_spatial(pp)?;
            let denom = g.add(tt, pp)?;
            let ratio = g.div(inner, denom)?;
            let mask = Tensor::from_vec((0..c).map(|j| if opts_includes(dice, j) { 1.0 } else { 0.0 }).collect());
            let mask = g.constant(mask);
            let r = g.mul(ratio, mask)?;
            let s = g.sum(r)?;
            let norm = dice.norm(c);
            let j = dice.classes(c).len() as f64;
            // norm * Σ (1 - 2 r_j) = norm * J - 2 norm Σ r_j
            let s = g.scale(s, -2.0 * norm)?;
            g.add_scalar(s, norm * j)
        }
        LossKind::Quadratic => {
            let d = g.sub(t, pred)?;
            let sq = g.mul(d, d)?;
            let s = g.sum(sq)?;
            g.scale(s, 0.5 / pixels)
        }
    }
}

fn opts_includes(opts: DiceOptions, j: usize) -> bool {
    opts.include_background || j > 0
}

/// Gradient of `D(z, f)` in its first argument (the soft target), used by
/// the projected and exponential target updates. The quadratic case is the
/// unnormalized `½|z - f|²`, whose gradient is `z - f`.
pub fn target_gradient(kind: LossKind, z: &ProbField, f: &ProbField, dice: DiceOptions) -> Result<Tensor> {
    z.same_shape(f)?;
    match kind {
        LossKind::Dice => dice_grad_with(z, f, dice),
        LossKind::Quadratic => {
            let d = z.data().iter().zip(f.data()).map(|(a, b)| a - b).collect();
            Tensor::new(z.as_tensor().shape(), d)
        }
        LossKind::CrossEntropy => {
            let p = z.pixels() as f64;
            let d = f.data().iter().map(|v| -v.max(PROB_FLOOR).ln() / p).collect();
            Tensor::new(z.as_tensor().shape(), d)
        }
    }
}

/// Hard-label Dice averaged over the classes present in the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanDice {
    pub mean: f64,
    /// `None` for classes absent from the reference.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

pub fn mean_dice(pred: &LabelMap, reference: &LabelMap, n_classes: usize) -> Result<MeanDice> {
    pred.same_shape(reference)?;
    let mut inter = vec![0usize; n_classes];
    let mut cp = vec![0usize; n_classes];
    let mut cr = vec![0usize; n_classes];
    for (&a, &b) in pred.data().iter().zip(reference.data()) {
        let (a, b) = (a as usize, b as usize);
        if a >= n_classes || b >= n_classes {
            return Err(Error::Data(format!("class index outside [0, {n_classes})")));
        }
        cp[a] += 1;
        cr[b] += 1;
        if a == b {
            inter[a] += 1;
        }
    }
    let mut per_class = vec![None; n_classes];
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut n = 0;
    for j in 0..n_classes {
        if cr[j] == 0 {
            skipped.push(j);
            continue;
        }
        let d = 2.0 * inter[j] as f64 / (cp[j] + cr[j]) as f64;
        per_class[j] = Some(d);
        sum += d;
        n += 1;
    }
    Ok(MeanDice {
        mean: if n == 0 { f64::NAN } else { sum / n as f64 },
        per_class,
        skipped,
    })
}

/// Physical size of a pixel along (rows, columns).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spacing {
    pub row: f64,
    pub col: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Self { row: 1.0, col: 1.0 }
    }
}

/// Percentile with linear interpolation between closest ranks of a sorted slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Squared Euclidean distance from every pixel to the nearest seed pixel,
/// computed with the separable lower-envelope transform.
fn squared_distance_transform(h: usize, w: usize, seeds: &[(usize, usize)], spacing: Spacing) -> Vec<f64> {
    const FAR: f64 = f64::INFINITY;
    let mut grid = vec![FAR; h * w];
    for &(y, x) in seeds {
        grid[y * w + x] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        envelope_1d(&col, spacing.row * spacing.row, &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        row.copy_from_slice(&grid[y * w..(y + 1) * w]);
        envelope_1d(&row, spacing.col * spacing.col, &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// `out[p] = min_q s2·(p-q)² + f[q]` over finite `f[q]`.
fn envelope_1d(f: &[f64], s2: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let cross = |q: usize, r: usize| -> f64 {
        let (qf, rf) = (q as f64, r as f64);
        ((f[q] + s2 * qf * qf) - (f[r] + s2 * rf * rf)) / (2.0 * s2 * (qf - rf))
    };
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let s = cross(q, r);
                    if s <= *z.last().expect("z tracks v") {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let d = p as f64 - v[k] as f64;
        *o = s2 * d * d + f[v[k]];
    }
}

/// 95th percentile of the pooled symmetric boundary-to-boundary distances.
pub fn hausdorff95(a: &BinaryMask, b: &BinaryMask, spacing: Spacing) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape("hausdorff95 masks differ in shape".into()));
    }
    let (ba, bb) = (a.boundary(), b.boundary());
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::UndefinedDistance("empty mask".into()));
    }
    let dist_to_b = squared_distance_transform(a.height, a.width, &bb, spacing);
    let dist_to_a = squared_distance_transform(a.height, a.width, &ba, spacing);
    let mut pooled: Vec<f64> = ba
        .iter()
        .map(|&(y, x)| dist_to_b[y * a.width + x].sqrt())
        .chain(bb.iter().map(|&(y, x)| dist_to_a[y * a.width + x].sqrt()))
        .collect();
    pooled.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&pooled, 95.0))
}

/// Mean 95HD over classes present in the reference. A class missing from the
/// prediction scores the image diagonal.
pub fn mean_hausdorff95(pred: &LabelMap, reference: &LabelMap, n_classes: usize) -> Result<f64> {
    pred.same_shape(reference)?;
    let diag = ((pred.height().pow(2) + pred.width().pow(2)) as f64).sqrt();
    let mut sum = 0.0;
    let mut n = 0;
    for j in 0..n_classes as u16 {
        let r = reference.mask(j);
        if r.count() == 0 {
            continue;
        }
        let p = pred.mask(j);
        sum += if p.count() == 0 {
            diag
        } else {
            hausdorff95(&p, &r, Spacing::default())?
        };
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}
