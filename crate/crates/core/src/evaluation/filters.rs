//! Image filters used by the metrics and probes.

use crate::tensor::Tensor;

/// Normalised 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable filtering of one `h x w` plane. Taps falling outside the image
/// are dropped and the remaining weights renormalised, so a constant image
/// stays constant up to the border.
pub fn filter_plane(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(len - 1);
                let (mut acc, mut norm) = (0.0, 0.0);
                for q in lo..=hi {
                    let t = taps[q + r - pos];
                    let v = if horizontal { src[y * w + q] } else { src[q * w + x] };
                    acc += t * v;
                    norm += t;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    let tmp = pass(plane, true);
    pass(&tmp, false)
}

/// Gaussian blur of every channel of a `[C, H, W]` image with standard
/// deviation `sigma` (truncated at 3 sigma). `sigma <= 0` returns a copy.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return image.clone();
    }
    let (c, h, w) = image.dims3();
    let taps = gaussian_kernel(sigma, (3.0 * sigma).ceil() as usize);
    let mut data = Vec::with_capacity(image.len());
    for ch in 0..c {
        data.extend(filter_plane(&image.data()[ch * h * w..(ch + 1) * h * w], h, w, &taps));
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// ITU-R BT.601 luma of a `[3, H, W]` image (single-channel input is
/// returned unchanged).
pub fn luma(image: &Tensor) -> Vec<f64> {
    let (c, h, w) = image.dims3();
    let d = image.data();
    if c == 1 {
        return d.to_vec();
    }
    let n = h * w;
    (0..n).map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).collect()
}

/// 2x2 mean pooling (odd trailing row/column dropped).
pub fn downsample2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            out[y * w2 + x] =
                (plane[2 * y * w + 2 * x] + plane[2 * y * w + 2 * x + 1] + plane[(2 * y + 1) * w + 2 * x] + plane[(2 * y + 1) * w + 2 * x + 1])
                    / 4.0;
        }
    }
    (out, h2, w2)
}
