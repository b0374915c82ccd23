//! Reconstruction metrics and the sample-level distance used for acceptance.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{dot_slices, Rng, Signal};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const DEFAULT_PROJECTIONS: usize = 128;
/// Seed for projection directions; independent of any sampler seed.
pub const METRIC_SEED: u64 = 0x5157_4153_5345_5244;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub sw_distance: Option<f64>,
}

fn check_same_shape(context: &'static str, a: &Signal, b: &Signal) -> Result<()> {
    check_len(context, a.len(), b.len())?;
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "{context}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10 log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &Signal, estimate: &Signal, peak: f64) -> Result<f64> {
    check_same_shape("psnr", reference, estimate)?;
    if !(peak > 0.0) {
        return Err(Error::Contract(format!(
            "psnr peak must be > 0, got {peak}"
        )));
    }
    if reference.is_empty() {
        return Err(Error::Contract("psnr of empty images".into()));
    }
    let mse = reference
        .as_slice()
        .iter()
        .zip(estimate.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over non-overlapping 8×8 windows with peak 1.
pub fn ssim(reference: &Signal, estimate: &Signal) -> Result<f64> {
    ssim_with_peak(reference, estimate, 1.0)
}

/// Mean SSIM over non-overlapping 8×8 windows. Partial windows at the right
/// and bottom edges are skipped.
pub fn ssim_with_peak(reference: &Signal, estimate: &Signal, peak: f64) -> Result<f64> {
    check_same_shape("ssim", reference, estimate)?;
    let (h, w) = reference.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (x, y) = (reference.as_slice(), estimate.as_slice());
    let mut total = 0.0;
    let mut windows = 0usize;
    for r0 in (0..=h - SSIM_WINDOW).step_by(SSIM_WINDOW) {
        for c0 in (0..=w - SSIM_WINDOW).step_by(SSIM_WINDOW) {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    let (a, b) = (x[r * w + c], y[r * w + c]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx).max(0.0);
            let vy = (syy / n - my * my).max(0.0);
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// 1-D Wasserstein-1 distance between two empirical distributions with
/// uniform weights, by integrating `|F⁻¹(u) − G⁻¹(u)|` over `u ∈ [0, 1]`.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Mean over random unit directions of the 1-D W1 distance between the
/// projected sample sets.
pub fn sliced_wasserstein(
    a: &[Signal],
    b: &[Signal],
    projections: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract(
            "sliced_wasserstein needs nonempty sample sets".into(),
        ));
    }
    if projections == 0 {
        return Err(Error::Contract(
            "sliced_wasserstein needs at least one projection".into(),
        ));
    }
    let dim = a[0].len();
    for s in a.iter().chain(b) {
        check_len("sliced_wasserstein", dim, s.len())?;
    }
    let mut total = 0.0;
    let mut pa = vec![0.0; a.len()];
    let mut pb = vec![0.0; b.len()];
    for _ in 0..projections {
        let mut dir = rng.normal_vec(dim);
        let norm = dot_slices(&dir, &dir).sqrt();
        if norm == 0.0 {
            dir[0] = 1.0;
        } else {
            dir.iter_mut().for_each(|d| *d /= norm);
        }
        for (p, s) in pa.iter_mut().zip(a) {
            *p = dot_slices(&dir, s.as_slice());
        }
        for (p, s) in pb.iter_mut().zip(b) {
            *p = dot_slices(&dir, s.as_slice());
        }
        total += wasserstein_1d(&mut pa, &mut pb);
    }
    Ok(total / projections as f64)
}

/// [`sliced_wasserstein`] with the default projection count and metric seed.
pub fn sliced_wasserstein_default(a: &[Signal], b: &[Signal]) -> Result<f64> {
    sliced_wasserstein(a, b, DEFAULT_PROJECTIONS, &mut Rng::new(METRIC_SEED))
}
