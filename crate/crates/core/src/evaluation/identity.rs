//! Identity-preservation probes for synthetic faces with known traits.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EyeGeometry, PairIndex, RenderInfo, SyntheticIdentitySpec, PUPIL, SCLERA};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Known traits behind one evaluation target.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityTruth {
    pub identity_id: String,
    pub spec: SyntheticIdentitySpec,
    pub render: RenderInfo,
}

/// Looks up the synthetic traits for each evaluation pair's target.
pub fn identity_truths(dataset: &Dataset, pairs: &[PairIndex]) -> Result<Vec<IdentityTruth>> {
    let sidecar = dataset
        .sidecar()
        .ok_or_else(|| Error::Validation("identity probes need the synthetic sidecar".into()))?;
    pairs
        .iter()
        .map(|p| {
            let id = &dataset.records()[p.identity].identity_id;
            let identity = sidecar
                .identity(id)
                .ok_or_else(|| Error::Validation(format!("no synthetic spec for identity {id}")))?;
            let render = identity
                .renders
                .get(p.target)
                .ok_or_else(|| Error::Validation(format!("no render info for {id} image {}", p.target)))?;
            Ok(IdentityTruth {
                identity_id: id.clone(),
                spec: identity.spec.clone(),
                render: render.clone(),
            })
        })
        .collect()
}

fn l2(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn pixel(image: &Tensor, x: usize, y: usize) -> [f64; 3] {
    let (_, h, w) = image.dims3();
    let d = image.data();
    [0, 1, 2].map(|c| d[c * h * w + y * w + x])
}

/// Mean colour over the iris pixels of both eyes.
pub fn mean_iris_color(image: &Tensor, render: &RenderInfo) -> Result<[f64; 3]> {
    let (c, h, w) = image.dims3();
    if c != 3 || h != w {
        return Err(Error::Shape {
            expected: vec![3, h, h],
            actual: image.shape().to_vec(),
        });
    }
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for eye in [&render.left_eye, &render.right_eye] {
        for (x, y) in eye.iris_pixels(h) {
            let p = pixel(image, x, y);
            for k in 0..3 {
                sum[k] += p[k];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation("iris region is empty at this image size".into()));
    }
    Ok(sum.map(|s| s / n as f64))
}

pub fn iris_color_error(image: &Tensor, truth: &IdentityTruth) -> Result<f64> {
    Ok(l2(mean_iris_color(image, &truth.render)?, truth.render.iris_rgb))
}

/// Height-to-width spread ratio `sqrt(var_y / var_x)` of the pixels near an
/// eye that look like eye rather than skin.
pub fn eye_aspect(image: &Tensor, eye: &EyeGeometry, truth: &IdentityTruth) -> Result<f64> {
    let (_, h, w) = image.dims3();
    let illum = truth.render.illumination;
    let eye_colors = [SCLERA, truth.spec.iris_color, PUPIL].map(|c| c.map(|v| v * illum));
    let skin = truth.spec.skin_tone.map(|v| v * illum);
    let margin = 2.0;
    let x0 = (eye.cx - eye.half_width - margin).floor().max(0.0) as usize;
    let x1 = ((eye.cx + eye.half_width + margin).ceil() as usize).min(w);
    let y0 = (eye.cy - eye.half_height - margin).floor().max(0.0) as usize;
    let y1 = ((eye.cy + eye.half_height + margin).ceil() as usize).min(h);
    let mut pts = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let p = pixel(image, x, y);
            let to_eye = eye_colors.iter().map(|c| l2(p, *c)).fold(f64::INFINITY, f64::min);
            if to_eye < l2(p, skin) {
                pts.push((x as f64, y as f64));
            }
        }
    }
    if pts.len() < 2 {
        return Ok(0.0);
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let vx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / n;
    let vy = pts.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / n;
    Ok(if vx > 0.0 { (vy / vx).sqrt() } else { 0.0 })
}

/// Mean absolute aspect difference between an in-painted image and its
/// ground truth, over both eyes.
pub fn eye_shape_error(inpainted: &Tensor, ground_truth: &Tensor, truth: &IdentityTruth) -> Result<f64> {
    let mut e = 0.0;
    for eye in [&truth.render.left_eye, &truth.render.right_eye] {
        e += (eye_aspect(inpainted, eye, truth)? - eye_aspect(ground_truth, eye, truth)?).abs();
    }
    Ok(e / 2.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityScore {
    /// Mean L2 between in-painted and true iris colour (the headline score).
    pub iris_color: f64,
    pub eye_shape: f64,
    pub count: usize,
}

/// Scores in-painted images against the traits of their targets.
pub fn identity_preservation_score(
    inpainted: &[Tensor],
    ground_truth: &[Tensor],
    truths: &[IdentityTruth],
) -> Result<IdentityScore> {
    if inpainted.len() != truths.len() || ground_truth.len() != truths.len() {
        return Err(Error::Validation(format!(
            "{} in-painted images, {} ground-truth images, {} identity specs",
            inpainted.len(),
            ground_truth.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Validation("no images to score".into()));
    }
    let mut s = IdentityScore {
        count: truths.len(),
        ..IdentityScore::default()
    };
    for ((img, gt), t) in inpainted.iter().zip(ground_truth).zip(truths) {
        s.iris_color += iris_color_error(img, t)?;
        s.eye_shape += eye_shape_error(img, gt, t)?;
    }
    s.iris_color /= truths.len() as f64;
    s.eye_shape /= truths.len() as f64;
    Ok(s)
}

/// Mean stored iris colour over every image of a synthetic dataset.
pub fn mean_iris_rgb(dataset: &Dataset) -> Result<[f64; 3]> {
    let sidecar = dataset
        .sidecar()
        .ok_or_else(|| Error::Validation("identity probes need the synthetic sidecar".into()))?;
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for record in dataset.records() {
        let identity = sidecar
            .identity(&record.identity_id)
            .ok_or_else(|| Error::Validation(format!("no synthetic spec for identity {}", record.identity_id)))?;
        for r in identity.renders.iter().take(record.images.len()) {
            for k in 0..3 {
                sum[k] += r.iris_rgb[k];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation("empty dataset".into()));
    }
    Ok(sum.map(|s| s / n as f64))
}

/// Iris score of a model that paints `mean` into every eye.
pub fn mean_predictor_score(truths: &[IdentityTruth], mean: [f64; 3]) -> f64 {
    truths.iter().map(|t| l2(t.render.iris_rgb, mean)).sum::<f64>() / truths.len().max(1) as f64
}
