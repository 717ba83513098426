//! SSIM and PSNR on [0,1] images.
//!
//! SSIM uses the original Wang et al. parameterization: 11×11 Gaussian window
//! (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1.0, valid-position windows
//! only, computed per channel and averaged. Identical inputs score exactly
//! 1.0 because numerator and denominator are then the same bit pattern.

use crate::error::{CoreError, Result};
use crate::img::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Reported in aggregates when PSNR is infinite (identical images).
pub const PSNR_CAP_DB: f64 = 100.0;

fn gaussian_window() -> [[f64; SSIM_WINDOW]; SSIM_WINDOW] {
    let mut w1 = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (k, w) in w1.iter_mut().enumerate() {
        let d = k as f64 - c;
        *w = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let mut w2 = [[0.0f64; SSIM_WINDOW]; SSIM_WINDOW];
    let mut total = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            w2[i][j] = w1[i] * w1[j];
            total += w2[i][j];
        }
    }
    for row in &mut w2 {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    w2
}

fn check_same_shape(a: &Image, b: &Image, context: &'static str) -> Result<()> {
    if a.pixels.dim() != b.pixels.dim() {
        return Err(CoreError::shape(
            context,
            format!("{:?} vs {:?}", a.pixels.dim(), b.pixels.dim()),
        ));
    }
    Ok(())
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    let (h, w, _) = a.pixels.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::invalid(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut channel_sum = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wv = win[i][j];
                        let pa = a.pixels[[y + i, x + j, ch]];
                        let pb = b.pixels[[y + i, x + j, ch]];
                        mu_a += wv * pa;
                        mu_b += wv * pb;
                        aa += wv * pa * pa;
                        bb += wv * pb * pb;
                        // Averaged grouping keeps the result bitwise symmetric
                        // in (a, b) while still collapsing to `aa` when a == b.
                        ab += 0.5 * (wv * pa * pb + wv * pb * pa);
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                acc += num / den;
            }
        }
        channel_sum += acc / (oh * ow) as f64;
    }
    Ok(channel_sum / 3.0)
}

/// 10·log10(1/MSE) on [0,1] pixels; +inf for identical images (callers cap
/// it at [`PSNR_CAP_DB`] when aggregating).
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b, "psnr")?;
    let n = a.pixels.len() as f64;
    let mut se = 0.0;
    for (pa, pb) in a.pixels.iter().zip(b.pixels.iter()) {
        let d = pa - pb;
        se += d * d;
    }
    let mse = se / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
