//! Multi-scale structural similarity on grayscale images.
//!
//! Five scales with the standard weights, an 11-tap Gaussian window
//! (sigma 1.5) and 2x2 mean pooling between scales. The window is applied
//! in "same" mode with renormalised border weights so small images keep all
//! five scales; images must be at least 32 pixels on each side. Negative
//! contrast-structure terms are clamped to zero before exponentiation.

use super::filters::{downsample2, filter_plane, gaussian_kernel, luma};
use crate::error::{check_shape, Error, Result};
use crate::tensor::Tensor;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MS_SSIM_MIN_SIZE: usize = 32;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// `(mean luminance term, mean contrast-structure term)` at one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> (f64, f64) {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_plane(a, h, w, taps);
    let mu_b = filter_plane(b, h, w, taps);
    let e_aa = filter_plane(&prod(a, a), h, w, taps);
    let e_bb = filter_plane(&prod(b, b), h, w, taps);
    let e_ab = filter_plane(&prod(a, b), h, w, taps);
    let (mut lum, mut cs) = (0.0, 0.0);
    for i in 0..h * w {
        let mm = mu_a[i] * mu_b[i];
        let var_a = e_aa[i] - mu_a[i] * mu_a[i];
        let var_b = e_bb[i] - mu_b[i] * mu_b[i];
        let cov = e_ab[i] - mm;
        lum += (2.0 * mm + c1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
        cs += (2.0 * cov + c2) / (var_a + var_b + c2);
    }
    let n = (h * w) as f64;
    (lum / n, cs / n)
}

/// MS-SSIM of two images of equal shape; colour images are reduced to luma.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_shape(a.shape(), b.shape())?;
    let (_, h, w) = a.dims3();
    if h < MS_SSIM_MIN_SIZE || w < MS_SSIM_MIN_SIZE {
        return Err(Error::Validation(format!(
            "MS-SSIM needs at least {MS_SSIM_MIN_SIZE}x{MS_SSIM_MIN_SIZE} images for five scales, got {h}x{w}"
        )));
    }
    let taps = gaussian_kernel(1.5, 5);
    let (mut pa, mut pb, mut h, mut w) = (luma(a), luma(b), h, w);
    let mut value = 1.0;
    for (level, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (lum, cs) = ssim_terms(&pa, &pb, h, w, &taps);
        let term = if level + 1 == MS_SSIM_WEIGHTS.len() { lum * cs } else { cs };
        value *= term.max(0.0).powf(weight);
        if level + 1 < MS_SSIM_WEIGHTS.len() {
            let (na, nh, nw) = downsample2(&pa, h, w);
            pb = downsample2(&pb, h, w).0;
            pa = na;
            h = nh;
            w = nw;
        }
    }
    Ok(value)
}

/// `1 - MS-SSIM`, so lower is better.
pub fn ms_ssim_dissimilarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((1.0 - ms_ssim(a, b)?).clamp(0.0, 1.0))
}
