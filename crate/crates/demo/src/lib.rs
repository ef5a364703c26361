//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The plain functions carry the logic and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors for JavaScript.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use sud::losses::{LabelMap, ProbField};
use sud::spatial::{filter_factors, LinearDenoiser};
use sud::synth::{corrupt_labels, gen_scene, CorruptionParams, ShapeSceneConfig};
use sud::temporal::{impulse_response, schedule_at, Schedule};

/// Side length of the corruption preview panels.
pub const PREVIEW: usize = 64;

const PALETTE: [[f64; 3]; 3] = [[30.0, 30.0, 40.0], [240.0, 150.0, 40.0], [40.0, 190.0, 180.0]];

/// Flattened `(λ, direct, proximal)` triples of a Gaussian ring smoother,
/// ascending in λ.
pub fn filter_rows(size: usize, taps: usize, sigma: f64, beta: f64) -> sud::Result<Vec<f64>> {
    if taps == 0 || taps > size || sigma <= 0.0 {
        return Err(sud::Error::Config("need 0 < taps <= size and sigma > 0".into()));
    }
    let f = filter_factors(&LinearDenoiser::gaussian_ring(size, taps, sigma), beta)?;
    Ok(f.rows().flat_map(|r| [r[1], r[2], r[3]]).collect())
}

fn paint(field: &ProbField, out: &mut [u8], stride: usize, x0: usize) {
    let (h, w, c) = (field.height(), field.width(), field.classes());
    for y in 0..h {
        for x in 0..w {
            let mut rgb = [0.0; 3];
            for j in 0..c {
                let p = field.channel(j)[y * w + x];
                for (k, v) in rgb.iter_mut().enumerate() {
                    *v += p * PALETTE[j % PALETTE.len()][k];
                }
            }
            let o = 4 * (y * stride + x0 + x);
            for k in 0..3 {
                out[o + k] = rgb[k].round().clamp(0.0, 255.0) as u8;
            }
            out[o + 3] = 255;
        }
    }
}

/// RGBA pixels of three panels side by side: a clean synthetic label, its
/// corrupted probability field, and that field's argmax.
pub fn corruption_rgba(seed: u64, sigma: f64, scale: usize) -> sud::Result<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, label) = gen_scene(&ShapeSceneConfig::desk(3), &mut rng)?;
    let z = corrupt_labels(&label, &CorruptionParams::new(sigma, scale), &mut rng)?;
    let hard: LabelMap = z.argmax();
    let stride = 3 * PREVIEW;
    let mut out = vec![0u8; 4 * stride * PREVIEW];
    paint(&ProbField::one_hot(&label), &mut out, stride, 0);
    paint(&z, &mut out, stride, PREVIEW);
    paint(&ProbField::one_hot(&hard), &mut out, stride, 2 * PREVIEW);
    Ok(out)
}

/// Flattened `(α, λ)` pairs at `points` evenly spaced steps of the default
/// linear schedule.
pub fn schedule_pairs(total_steps: usize, lambda_max: f64, points: usize) -> sud::Result<Vec<f64>> {
    let s = Schedule::linear(total_steps, lambda_max);
    s.validate()?;
    let points = points.max(2);
    (0..points)
        .map(|i| schedule_at(&s, i * total_steps / (points - 1)))
        .map(|r| r.map(|(a, l)| [a, l]))
        .collect::<sud::Result<Vec<_>>>()
        .map(|v| v.concat())
}

fn js(e: sud::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn filter_response(size: usize, taps: usize, sigma: f64, beta: f64) -> Result<Vec<f64>, JsError> {
    filter_rows(size, taps, sigma, beta).map_err(js)
}

#[wasm_bindgen]
pub fn corruption_preview(seed: u64, sigma: f64, scale: usize) -> Result<Vec<u8>, JsError> {
    corruption_rgba(seed, sigma, scale).map_err(js)
}

#[wasm_bindgen]
pub fn ema_impulse(alpha: f64, len: usize) -> Result<Vec<f64>, JsError> {
    impulse_response(alpha, len).map_err(js)
}

#[wasm_bindgen]
pub fn schedule(total_steps: usize, lambda_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
    schedule_pairs(total_steps, lambda_max, points).map_err(js)
}

#[wasm_bindgen]
pub fn preview_size() -> usize {
    PREVIEW
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_rows_follow_the_proximal_formula() {
        let rows = filter_rows(64, 7, 1.0, 1.0).unwrap();
        assert_eq!(rows.len(), 3 * 64);
        let dc = &rows[..3];
        assert!(dc[0].abs() < 1e-9 && (dc[1] - 1.0).abs() < 1e-9 && (dc[2] - 1.0).abs() < 1e-9);
        for r in rows.chunks_exact(3) {
            assert!((r[2] - 1.0 / (1.0 + r[0])).abs() < 1e-9);
        }
        assert!(filter_rows(4, 7, 1.0, 0.5).is_err());
    }

    #[test]
    fn preview_has_three_opaque_panels() {
        let px = corruption_rgba(3, 0.0, 1).unwrap();
        assert_eq!(px.len(), 4 * 3 * PREVIEW * PREVIEW);
        assert!(px.chunks_exact(4).all(|p| p[3] == 255));
        // Without noise the argmax panel equals the clean panel.
        let stride = 4 * 3 * PREVIEW;
        for y in 0..PREVIEW {
            let row = &px[y * stride..(y + 1) * stride];
            assert_eq!(&row[..4 * PREVIEW], &row[8 * PREVIEW..]);
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = schedule_pairs(100, 4.0, 5).unwrap();
        assert_eq!(&s[..2], &[1.0, 0.0]);
        assert_eq!(&s[8..], &[0.0, 4.0]);
    }
}
