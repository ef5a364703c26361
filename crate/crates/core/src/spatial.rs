//! Spatial denoisers and the spectral view of direct versus proximal denoising.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::losses::ProbField;
use crate::nets::{self, ModelParams};

/// How pseudo-targets are denoised.
#[derive(Clone, Debug)]
pub enum DenoiserSpec {
    Identity,
    /// Normalized separable Gaussian with `2 * radius + 1` taps, zero padded.
    Gaussian { sigma: f64, radius: usize },
    /// Pretrained auto-encoder, weights frozen.
    Learned(Box<ModelParams>),
}

/// Normalized 1D Gaussian taps, centre at index `radius`.
pub fn gaussian_kernel_1d(sigma: f64, radius: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Channel-wise separable blur with zero padding (no renormalization).
fn blur_channels(f: &ProbField, kernel: &[f64]) -> Vec<f64> {
    let (c, h, w) = (f.classes(), f.height(), f.width());
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    let src = f.data();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let xx = x as isize + t as isize - r;
                    if xx >= 0 && xx < w as isize {
                        acc += kv * src[base + y * w + xx as usize];
                    }
                }
                tmp[base + y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let yy = y as isize + t as isize - r;
                    if yy >= 0 && yy < h as isize {
                        acc += kv * tmp[base + yy as usize * w + x];
                    }
                }
                out[base + y * w + x] = acc;
            }
        }
    }
    out
}

fn renormalize(data: &mut [f64], c: usize, p: usize) {
    for px in 0..p {
        let s: f64 = (0..c).map(|k| data[k * p + px]).sum();
        if s > 0.0 {
            for k in 0..c {
                data[k * p + px] /= s;
            }
        }
    }
}

impl DenoiserSpec {
    /// Denoiser output before any per-pixel renormalization (the Gaussian
    /// blur itself; learned and identity outputs are returned as is).
    fn raw(&self, f: &ProbField) -> Result<ProbField> {
        match self {
            DenoiserSpec::Identity => Ok(f.clone()),
            DenoiserSpec::Gaussian { sigma, radius } => {
                if *sigma <= 0.0 {
                    return Err(Error::OutOfRange(format!("gaussian sigma {sigma}")));
                }
                let k = gaussian_kernel_1d(*sigma, *radius);
                ProbField::new(f.classes(), f.height(), f.width(), blur_channels(f, &k))
            }
            DenoiserSpec::Learned(p) => {
                if p.config.in_channels != f.classes() {
                    return Err(Error::Shape(format!(
                        "denoiser expects {} classes, field has {}",
                        p.config.in_channels,
                        f.classes()
                    )));
                }
                nets::forward(p, f.as_tensor())
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, DenoiserSpec::Identity)
    }
}

/// `a(f)`: the denoised field, back on the simplex.
pub fn apply_denoiser(spec: &DenoiserSpec, f: &ProbField) -> Result<ProbField> {
    let mut out = spec.raw(f)?;
    if let DenoiserSpec::Gaussian { .. } = spec {
        let (c, p) = (out.classes(), out.pixels());
        renormalize(out.data_mut(), c, p);
    }
    Ok(out)
}

/// `β·a(f) + (1-β)·f`.
pub fn direct_blend(f: &ProbField, af: &ProbField, beta: f64) -> Result<ProbField> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::OutOfRange(format!("blend weight beta = {beta} outside [0, 1]")));
    }
    ProbField::combine(&[(beta, af), (1.0 - beta, f)])
}

/// `R'(f) = f - a(f)`.
pub fn red_gradient(f: &ProbField, spec: &DenoiserSpec) -> Result<Tensor> {
    let af = apply_denoiser(spec, f)?;
    let d = f.data().iter().zip(af.data()).map(|(a, b)| a - b).collect();
    Tensor::new(f.as_tensor().shape(), d)
}

/// Relative deviation from local homogeneity, `|a(cf) - c·a(f)|∞ / |a(f)|∞`,
/// measured on the un-renormalized denoiser output.
pub fn homogeneity_check(spec: &DenoiserSpec, f: &ProbField, c: f64) -> Result<f64> {
    if !(0.99..=1.01).contains(&c) {
        return Err(Error::OutOfRange(format!("homogeneity scale {c} outside [0.99, 1.01]")));
    }
    let mut scaled = f.clone();
    scaled.data_mut().iter_mut().for_each(|v| *v *= c);
    let a = spec.raw(f)?;
    let ac = spec.raw(&scaled)?;
    let num = ac
        .data()
        .iter()
        .zip(a.data())
        .map(|(x, y)| (x - c * y).abs())
        .fold(0.0, f64::max);
    let den = a.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// Linear (or linearized) denoiser `A` acting on flattened fields.
#[derive(Clone, Debug)]
pub enum LinearDenoiser {
    Dense(DMatrix<f64>),
    /// Periodic convolution on an `h×w` torus; `kernel` is `kh×kw` row-major
    /// with its centre at `(kh/2, kw/2)`. A ring is the case `h = kh = 1`.
    Circulant {
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        kernel: Vec<f64>,
    },
}

pub const SYMMETRY_TOL: f64 = 1e-10;
pub const MAX_DENSE: usize = 4096;

impl LinearDenoiser {
    /// Ring of `n` points blurred by a normalized Gaussian with `taps` taps.
    pub fn gaussian_ring(n: usize, taps: usize, sigma: f64) -> Self {
        assert!(taps % 2 == 1, "odd tap count");
        LinearDenoiser::Circulant {
            h: 1,
            w: n,
            kh: 1,
            kw: taps,
            kernel: gaussian_kernel_1d(sigma, taps / 2),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            LinearDenoiser::Dense(m) => m.nrows(),
            LinearDenoiser::Circulant { h, w, .. } => h * w,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            LinearDenoiser::Dense(m) => (m * DVector::from_column_slice(x)).as_slice().to_vec(),
            LinearDenoiser::Circulant { h, w, kh, kw, kernel } => {
                let (h, w, kh, kw) = (*h, *w, *kh, *kw);
                let mut out = vec![0.0; h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for a in 0..kh {
                            for b in 0..kw {
                                let yy = (y + h * kh + a - kh / 2) % h;
                                let xs = (xx + w * kw + b - kw / 2) % w;
                                acc += kernel[a * kw + b] * x[yy * w + xs];
                            }
                        }
                        out[y * w + xx] = acc;
                    }
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            LinearDenoiser::Dense(m) => m.clone(),
            _ => {
                let n = self.size();
                let mut m = DMatrix::zeros(n, n);
                let mut e = vec![0.0; n];
                for j in 0..n {
                    e[j] = 1.0;
                    let col = self.apply(&e);
                    e[j] = 0.0;
                    for (i, v) in col.into_iter().enumerate() {
                        m[(i, j)] = v;
                    }
                }
                m
            }
        }
    }

    pub fn asymmetry(&self) -> f64 {
        let m = self.to_dense();
        (&m - m.transpose()).amax()
    }

    /// Eigenvalues of a circulant operator from the 2D DFT of its kernel
    /// (real for symmetric kernels), sorted descending.
    pub fn circulant_eigenvalues(&self) -> Option<Vec<f64>> {
        let LinearDenoiser::Circulant { h, w, .. } = self else {
            return None;
        };
        let (h, w) = (*h, *w);
        // first column of the operator: response to a delta at the origin
        let mut delta = vec![0.0; h * w];
        delta[0] = 1.0;
        let col = self.apply(&delta);
        let mut buf: Vec<Complex<f64>> = col.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let mut planner = FftPlanner::new();
        let row_fft = planner.plan_fft_forward(w);
        for row in buf.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        if h > 1 {
            let col_fft = planner.plan_fft_forward(h);
            let mut tmp = vec![Complex::new(0.0, 0.0); h];
            for x in 0..w {
                for y in 0..h {
                    tmp[y] = buf[y * w + x];
                }
                col_fft.process(&mut tmp);
                for y in 0..h {
                    buf[y * w + x] = tmp[y];
                }
            }
        }
        let mut ev: Vec<f64> = buf.iter().map(|c| c.re).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        Some(ev)
    }

    /// Dense symmetric eigendecomposition, eigenvalues sorted descending with
    /// matching eigenvector columns.
    pub fn eigen(&self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let n = self.size();
        if n > MAX_DENSE {
            return Err(Error::OutOfRange(format!("{n} pixels exceed dense analysis limit {MAX_DENSE}")));
        }
        let asym = self.asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(Error::Asymmetric(asym));
        }
        let eig = SymmetricEigen::new(self.to_dense());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
        Ok((values, vectors))
    }
}

/// Solves `(I + β(I - A)) z = f` by conjugate gradients.
pub fn proximal_denoise(f: &[f64], a: &LinearDenoiser, beta: f64) -> Result<Vec<f64>> {
    proximal_denoise_with(f, a, beta, 1e-10, 10 * f.len().max(10))
}

pub fn proximal_denoise_with(
    f: &[f64],
    a: &LinearDenoiser,
    beta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    if beta < 0.0 {
        return Err(Error::OutOfRange(format!("beta = {beta} must be non-negative")));
    }
    if f.len() != a.size() {
        return Err(Error::Shape(format!("field of {} values for operator of size {}", f.len(), a.size())));
    }
    let op = |x: &[f64]| -> Vec<f64> {
        let ax = a.apply(x);
        x.iter().zip(&ax).map(|(xi, ai)| xi + beta * (xi - ai)).collect()
    };
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let mut z = f.to_vec();
    let az = op(&z);
    let mut r: Vec<f64> = f.iter().zip(&az).map(|(a, b)| a - b).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for _ in 0..max_iter {
        if rr.sqrt() < tol {
            return Ok(z);
        }
        let ap = op(&p);
        let alpha = rr / dot(&p, &ap);
        z.iter_mut().zip(&p).for_each(|(zi, pi)| *zi += alpha * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
        let rr_new = dot(&r, &r);
        let gamma = rr_new / rr;
        rr = rr_new;
        p.iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + gamma * *pi);
    }
    if rr.sqrt() < tol {
        return Ok(z);
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: rr.sqrt(),
    })
}

/// Spectral filter factors of the direct blend `βA + (1-β)I` and of the
/// proximal operator `(I + β(I - A))⁻¹`, indexed by `λ_n = 1 - eig_n(A)`.
#[derive(Clone, Debug)]
pub struct FilterFactors {
    pub beta: f64,
    /// Ascending.
    pub lambdas: Vec<f64>,
    /// `1 - βλ_n`, descending.
    pub direct: Vec<f64>,
    /// `1 / (1 + βλ_n)`, descending.
    pub proximal: Vec<f64>,
}

impl FilterFactors {
    pub fn from_lambdas(lambdas: Vec<f64>, beta: f64) -> Self {
        let direct = lambdas.iter().map(|l| 1.0 - beta * l).collect();
        let proximal = lambdas.iter().map(|l| 1.0 / (1.0 + beta * l)).collect();
        Self {
            beta,
            lambdas,
            direct,
            proximal,
        }
    }

    /// Largest violation of `1 ≥ 1-λ_1 ≥ … ≥ 1-λ_N ≥ 0` (zero when the chain holds).
    pub fn chain_violation(&self) -> f64 {
        let a: Vec<f64> = self.lambdas.iter().map(|l| 1.0 - l).collect();
        let mut worst: f64 = 0.0;
        if let Some(&first) = a.first() {
            worst = worst.max(first - 1.0);
        }
        if let Some(&last) = a.last() {
            worst = worst.max(-last);
        }
        for w in a.windows(2) {
            worst = worst.max(w[1] - w[0]);
        }
        worst
    }

    /// Rows `(beta, lambda, direct, proximal, gap, bound)` with gap = |direct - proximal|
    /// and bound = (βλ)².
    pub fn rows(&self) -> impl Iterator<Item = [f64; 6]> + '_ {
        (0..self.lambdas.len()).map(move |i| {
            let l = self.lambdas[i];
            let gap = (self.direct[i] - self.proximal[i]).abs();
            [self.beta, l, self.direct[i], self.proximal[i], gap, (self.beta * l).powi(2)]
        })
    }
}

/// Blend weight `β/(1+β)` whose direct factor `1 - β'λ` coincides with the
/// proximal factor `1/(1+βλ)` at both ends of the spectrum, λ = 0 and λ = 1.
pub fn matched_blend_weight(beta: f64) -> f64 {
    beta / (1.0 + beta)
}

pub const FILTER_CSV_HEADER: &str = "beta,lambda,direct,proximal,gap,bound";

pub fn filter_factors(a: &LinearDenoiser, beta: f64) -> Result<FilterFactors> {
    let (eig, _) = a.eigen()?;
    let mut lambdas: Vec<f64> = eig.iter().map(|e| 1.0 - e).collect();
    lambdas.sort_by(f64::total_cmp);
    Ok(FilterFactors::from_lambdas(lambdas, beta))
}

pub fn filter_factors_csv(sets: &[FilterFactors]) -> String {
    let mut s = String::from(FILTER_CSV_HEADER);
    s.push('\n');
    for set in sets {
        for r in set.rows() {
            s.push_str(&format!("{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n", r[0], r[1], r[2], r[3], r[4], r[5]));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(c: usize, h: usize, w: usize, seed: u64) -> ProbField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        crate::diffcore::softmax_channels_inplace(&mut d, c, h * w);
        ProbField::new(c, h, w, d).unwrap()
    }

    fn total_variation(f: &ProbField) -> f64 {
        let (c, h, w) = (f.classes(), f.height(), f.width());
        let mut tv = 0.0;
        for k in 0..c {
            let ch = f.channel(k);
            for y in 0..h {
                for x in 0..w {
                    if x + 1 < w {
                        tv += (ch[y * w + x + 1] - ch[y * w + x]).abs();
                    }
                    if y + 1 < h {
                        tv += (ch[(y + 1) * w + x] - ch[y * w + x]).abs();
                    }
                }
            }
        }
        tv
    }

    const GAUSS: DenoiserSpec = DenoiserSpec::Gaussian { sigma: 1.0, radius: 2 };

    #[test]
    fn identity_and_constant_fixed_points() {
        let f = random_field(3, 6, 5, 1);
        assert_eq!(apply_denoiser(&DenoiserSpec::Identity, &f).unwrap(), f);
        let c = ProbField::new(2, 5, 7, [vec![0.3; 35], vec![0.7; 35]].concat()).unwrap();
        let out = apply_denoiser(&GAUSS, &c).unwrap();
        assert!(out.as_tensor().max_abs_diff(c.as_tensor()) < 1e-12);
    }

    #[test]
    fn gaussian_reduces_checkerboard_variation() {
        let (h, w) = (8, 8);
        let mut d = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let on = ((x + y) % 2) as f64;
                d[y * w + x] = on;
                d[h * w + y * w + x] = 1.0 - on;
            }
        }
        let f = ProbField::new(2, h, w, d).unwrap();
        let out = apply_denoiser(&GAUSS, &f).unwrap();
        assert!(total_variation(&out) < total_variation(&f));
        assert!(out.simplex_violation() < 1e-12);
    }

    #[test]
    fn blend_cases() {
        let f = ProbField::new(2, 1, 1, vec![1.0, 0.0]).unwrap();
        let af = ProbField::new(2, 1, 1, vec![0.6, 0.4]).unwrap();
        assert_eq!(direct_blend(&f, &af, 0.0).unwrap(), f);
        assert_eq!(direct_blend(&f, &af, 1.0).unwrap(), af);
        let h = direct_blend(&f, &af, 0.5).unwrap();
        assert!((h.data()[0] - 0.8).abs() < 1e-15 && (h.data()[1] - 0.2).abs() < 1e-15);
        assert!(direct_blend(&f, &af, 1.5).is_err());
    }

    #[test]
    fn red_gradient_cases() {
        let f = random_field(3, 5, 5, 2);
        assert!(red_gradient(&f, &DenoiserSpec::Identity).unwrap().data().iter().all(|&v| v == 0.0));
        let g = red_gradient(&f, &GAUSS).unwrap();
        let af = apply_denoiser(&GAUSS, &f).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.data()[i], f.data()[i] - af.data()[i]);
        }
        let c = ProbField::uniform(3, 4, 4);
        assert!(red_gradient(&c, &GAUSS).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn homogeneity_of_linear_denoisers() {
        let f = random_field(3, 6, 6, 3);
        assert!(homogeneity_check(&GAUSS, &f, 1.005).unwrap() < 1e-12);
        assert_eq!(homogeneity_check(&DenoiserSpec::Identity, &f, 0.995).unwrap(), 0.0);
        assert!(homogeneity_check(&GAUSS, &f, 1.2).is_err());
    }

    #[test]
    fn proximal_special_cases() {
        let a = LinearDenoiser::gaussian_ring(16, 5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = proximal_denoise(&f, &a, 0.0).unwrap();
        assert!(z.iter().zip(&f).all(|(p, q)| (p - q).abs() < 1e-12));
        let id = LinearDenoiser::Dense(DMatrix::identity(16, 16));
        let z = proximal_denoise(&f, &id, 3.0).unwrap();
        assert!(z.iter().zip(&f).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn proximal_scales_eigenvectors() {
        let a = LinearDenoiser::gaussian_ring(24, 7, 1.0);
        let (vals, vecs) = a.eigen().unwrap();
        let beta = 0.5;
        for (i, &ev) in vals.iter().enumerate() {
            let v: Vec<f64> = vecs.column(i).iter().copied().collect();
            let z = proximal_denoise(&v, &a, beta).unwrap();
            let factor = 1.0 / (1.0 + beta * (1.0 - ev));
            for (zi, vi) in z.iter().zip(&v) {
                assert!((zi - factor * vi).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn cg_reports_non_convergence() {
        let a = LinearDenoiser::gaussian_ring(32, 7, 1.0);
        let f: Vec<f64> = (0..32).map(|i| (i as f64).sin()).collect();
        let err = proximal_denoise_with(&f, &a, 1.0, 1e-14, 1).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { .. }));
    }

    #[test]
    fn circulant_spectrum_matches_dense() {
        for a in [
            LinearDenoiser::gaussian_ring(20, 7, 1.0),
            LinearDenoiser::Circulant {
                h: 6,
                w: 5,
                kh: 3,
                kw: 3,
                kernel: {
                    let k = gaussian_kernel_1d(0.8, 1);
                    let mut k2 = Vec::new();
                    for a in &k {
                        for b in &k {
                            k2.push(a * b);
                        }
                    }
                    k2
                },
            },
        ] {
            let fft = a.circulant_eigenvalues().unwrap();
            let (dense, _) = a.eigen().unwrap();
            for (x, y) in fft.iter().zip(&dense) {
                assert!((x - y).abs() < 1e-8);
            }
            assert!(fft.iter().all(|&e| (0.0..=1.0 + 1e-12).contains(&e)));
        }
    }

    #[test]
    fn filter_factor_endpoints_and_bound() {
        let ff = FilterFactors::from_lambdas(vec![0.0, 0.3, 1.0], 1.0);
        assert_eq!((ff.direct[0], ff.proximal[0]), (1.0, 1.0));
        assert_eq!((ff.direct[2], ff.proximal[2]), (0.0, 0.5));
        for beta in [0.0, 0.05, 0.25, 0.5, 0.75, 1.0] {
            let lambdas: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
            let ff = FilterFactors::from_lambdas(lambdas, beta);
            for r in ff.rows() {
                assert!(r[4] <= r[5] + 1e-15, "{r:?}");
            }
        }
    }

    #[test]
    fn matched_weight_closes_the_gap_at_the_ends() {
        for beta in [0.05, 0.125, 0.5, 1.0] {
            let direct = FilterFactors::from_lambdas(vec![0.0, 0.5, 1.0], matched_blend_weight(beta)).direct;
            let prox = FilterFactors::from_lambdas(vec![0.0, 0.5, 1.0], beta).proximal;
            assert_eq!(direct[0], prox[0]);
            assert!((direct[2] - prox[2]).abs() < 1e-15);
            // in between the blend passes more than the proximal step
            assert!(direct[1] > prox[1]);
        }
    }

    #[test]
    fn asymmetric_operator_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.1, 0.5]);
        assert!(matches!(filter_factors(&LinearDenoiser::Dense(m), 0.5), Err(Error::Asymmetric(_))));
    }

    #[test]
    fn gaussian_ring_chain_holds() {
        let ff = filter_factors(&LinearDenoiser::gaussian_ring(64, 7, 1.0), 0.125).unwrap();
        assert!(ff.chain_violation() <= 1e-12);
        let csv = filter_factors_csv(&[ff]);
        assert!(csv.starts_with(FILTER_CSV_HEADER));
        assert_eq!(csv.lines().count(), 65);
    }
}
