//! Evaluation metrics: PSNR, SSIM (11x11 Gaussian window, sigma 1.5,
//! K1 = 0.01, K2 = 0.03) and mean L1.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

fn check_dims(a: &Tensor4, b: &Tensor4) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "metric dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared error over all elements, in f64.
pub fn mse(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    check_dims(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

/// 10 log10(peak^2 / MSE) in dB; identical inputs give +infinity.
pub fn psnr(a: &Tensor4, b: &Tensor4, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Mean absolute difference over all elements.
pub fn mean_l1(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    check_dims(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(s / a.numel() as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in -half..=half {
        for j in -half..=half {
            let d2 = (i * i + j * j) as f64;
            w.push((-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean SSIM over all fully-inside window positions and channels, peak 1.0.
/// Inputs must be at least 11x11.
pub fn ssim(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    check_dims(a, b)?;
    let (n, c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let pa = a.plane(ni, ci);
            let pb = b.plane(ni, ci);
            for y in 0..=h - SSIM_WINDOW {
                for x in 0..=w - SSIM_WINDOW {
                    let mut mx = 0.0f64;
                    let mut my = 0.0f64;
                    let mut sxx = 0.0f64;
                    let mut syy = 0.0f64;
                    let mut sxy = 0.0f64;
                    let mut k = 0usize;
                    for dy in 0..SSIM_WINDOW {
                        let ra = &pa[(y + dy) * w + x..(y + dy) * w + x + SSIM_WINDOW];
                        let rb = &pb[(y + dy) * w + x..(y + dy) * w + x + SSIM_WINDOW];
                        for (va, vb) in ra.iter().zip(rb) {
                            let wk = win[k];
                            k += 1;
                            let (va, vb) = (*va as f64, *vb as f64);
                            mx += wk * va;
                            my += wk * vb;
                            sxx += wk * va * va;
                            syy += wk * vb * vb;
                            sxy += wk * va * vb;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cov = sxy - mx * my;
                    let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    total += val;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}
