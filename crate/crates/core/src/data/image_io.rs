use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads an image as a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

/// Quantises a `[3, H, W]` (or `[1, H, W]`) tensor to 8 bits and writes a PNG.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3();
    if c != 3 && c != 1 {
        return Err(Error::Validation(format!("cannot save {c}-channel image")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            px[ch] = quantize(image.data()[(src * h + y as usize) * w + x as usize]);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
