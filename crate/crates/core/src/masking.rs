//! Removal masks, masked inputs, compositing and the discriminator's local
//! eye-region crop.
//!
//! Masks are `[1, H, W]` tensors holding exactly 0.0 or 1.0; a 1 marks a pixel
//! to fill. Removed pixels are set to 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EyeAnnotation;
use crate::error::{check_shape, Error, Result};
use crate::geometry::Rect;
use crate::nn::{ResamplePlan, Window};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// One rectangle per eye box.
    #[default]
    PerEyeBoxes,
    /// A single rectangle spanning both eye boxes.
    UnionBox,
    /// No pixels removed.
    Empty,
}

/// Rectangular mask construction rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mode: MaskMode,
    /// Pixels added on every side of the annotation boxes before clipping.
    pub padding: u32,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            mode: MaskMode::PerEyeBoxes,
            padding: 1,
        }
    }
}

impl MaskSpec {
    pub fn per_eye(padding: u32) -> Self {
        Self {
            mode: MaskMode::PerEyeBoxes,
            padding,
        }
    }

    pub fn union(padding: u32) -> Self {
        Self {
            mode: MaskMode::UnionBox,
            padding,
        }
    }

    pub fn empty() -> Self {
        Self {
            mode: MaskMode::Empty,
            padding: 0,
        }
    }
}

/// Draws a padding per sample from an inclusive range, for variable-size
/// masks during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub mode: MaskMode,
    pub min_padding: u32,
    pub max_padding: u32,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self::fixed(MaskSpec::default())
    }
}

impl MaskSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.min_padding > self.max_padding {
            return Err(Error::Config(format!(
                "mask padding range {}..={} is empty",
                self.min_padding, self.max_padding
            )));
        }
        Ok(())
    }

    /// The smallest mask the schedule draws; used for evaluation.
    pub fn base(&self) -> MaskSpec {
        MaskSpec {
            mode: self.mode,
            padding: self.min_padding,
        }
    }

    pub fn fixed(spec: MaskSpec) -> Self {
        Self {
            mode: spec.mode,
            min_padding: spec.padding,
            max_padding: spec.padding,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> MaskSpec {
        let padding = if self.max_padding > self.min_padding {
            rng.gen_range(self.min_padding..=self.max_padding)
        } else {
            self.min_padding
        };
        MaskSpec {
            mode: self.mode,
            padding,
        }
    }
}

/// The clipped rectangles a spec removes from a `width x height` image.
pub fn mask_rects(annotation: &EyeAnnotation, spec: &MaskSpec, width: usize, height: usize) -> Result<Vec<Rect>> {
    annotation.validate()?;
    let pad = spec.padding as i32;
    let raw = match spec.mode {
        MaskMode::Empty => return Ok(Vec::new()),
        MaskMode::PerEyeBoxes => vec![annotation.left_box.pad(pad), annotation.right_box.pad(pad)],
        MaskMode::UnionBox => vec![annotation.union().pad(pad)],
    };
    raw.iter()
        .map(|r| {
            r.clip(width, height).ok_or_else(|| {
                Error::Annotation(format!("box {r:?} lies entirely outside the {width}x{height} image"))
            })
        })
        .collect()
}

/// `[1, H, W]` binary map with ones over the regions to fill.
pub fn build_mask(annotation: &EyeAnnotation, spec: &MaskSpec, height: usize, width: usize) -> Result<Tensor> {
    let mut mask = Tensor::zeros(&[1, height, width]);
    for r in mask_rects(annotation, spec, width, height)? {
        for y in r.y..r.bottom() {
            for x in r.x..r.right() {
                mask.data_mut()[y as usize * width + x as usize] = 1.0;
            }
        }
    }
    Ok(mask)
}

fn check_mask(image: &Tensor, mask: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match image.rank() {
        3 => image.dims3(),
        _ => return Err(Error::Shape { expected: vec![3, 0, 0], actual: image.shape().to_vec() }),
    };
    check_shape(&[1, h, w], mask.shape())?;
    Ok((c, h, w))
}

/// `image * (1 - mask)`.
pub fn apply_mask(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check_mask(image, mask)?;
    let mut out = image.clone();
    let plane = h * w;
    for ch in 0..c {
        for (v, m) in out.data_mut()[ch * plane..(ch + 1) * plane].iter_mut().zip(mask.data()) {
            if *m != 0.0 {
                *v *= 1.0 - m;
            }
        }
    }
    Ok(out)
}

/// `generated * mask + original * (1 - mask)`.
pub fn composite(generated: &Tensor, original: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_shape(original.shape(), generated.shape())?;
    let (c, h, w) = check_mask(original, mask)?;
    let plane = h * w;
    let mut out = original.clone();
    for ch in 0..c {
        let range = ch * plane..(ch + 1) * plane;
        for ((o, g), &m) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(&generated.data()[range])
            .zip(mask.data())
        {
            // Exact selection for binary masks keeps untouched pixels bit-identical.
            if m == 1.0 {
                *o = *g;
            } else if m != 0.0 {
                *o = *g * m + *o * (1.0 - m);
            }
        }
    }
    Ok(out)
}

/// Local-region crop parameters for the discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalSpec {
    /// Padding around the union of both eye boxes, as a fraction of the
    /// union's height (rounded up to whole pixels).
    pub padding_fraction: f64,
    pub out_height: usize,
    pub out_width: usize,
}

impl Default for LocalSpec {
    fn default() -> Self {
        Self {
            padding_fraction: 0.25,
            out_height: 32,
            out_width: 64,
        }
    }
}

impl LocalSpec {
    /// Default crop proportions scaled to an image side (32x64 at 64x64).
    pub fn for_image_size(size: usize) -> Self {
        Self {
            out_height: (size / 2).max(1),
            out_width: size,
            ..Self::default()
        }
    }

    pub fn padding_for(&self, annotation: &EyeAnnotation) -> u32 {
        (self.padding_fraction * annotation.union().h as f64).ceil() as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalRegion {
    pub crop_box: Rect,
    pub crop: Tensor,
}

/// Union of both eye boxes grown by `padding`, before clipping.
pub fn local_box_unclipped(annotation: &EyeAnnotation, padding: u32) -> Result<Rect> {
    let union = annotation.union();
    if union.area() == 0 {
        return Err(Error::Annotation(format!("degenerate eye union {union:?}")));
    }
    Ok(union.pad(padding as i32))
}

pub fn local_box(annotation: &EyeAnnotation, padding: u32, width: usize, height: usize) -> Result<Rect> {
    let r = local_box_unclipped(annotation, padding)?;
    r.clip(width, height)
        .ok_or_else(|| Error::Annotation(format!("local region {r:?} lies outside the image")))
}

/// Bilinear resampling plan from the local box onto the output grid.
pub fn local_plan(
    annotation: &EyeAnnotation,
    padding: u32,
    height: usize,
    width: usize,
    out: (usize, usize),
) -> Result<(Rect, ResamplePlan)> {
    let r = local_box(annotation, padding, width, height)?;
    let window = Window {
        x: r.x as f64,
        y: r.y as f64,
        w: r.w as f64,
        h: r.h as f64,
    };
    Ok((r, ResamplePlan::bilinear(height, width, window, out.0, out.1)))
}

/// Crops the eye region (both boxes plus `padding`) and resizes it
/// bilinearly to `out = (height, width)`.
pub fn extract_local(image: &Tensor, annotation: &EyeAnnotation, padding: u32, out: (usize, usize)) -> Result<LocalRegion> {
    let (c, h, w) = image.dims3();
    let (crop_box, plan) = local_plan(annotation, padding, h, w, out)?;
    let mut data = vec![0.0; c * out.0 * out.1];
    plan.apply(image.data(), c, &mut data);
    Ok(LocalRegion {
        crop_box,
        crop: Tensor::from_vec(&[c, out.0, out.1], data),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_boxes() -> EyeAnnotation {
        EyeAnnotation::new(Rect::new(4, 4, 8, 4), Rect::new(20, 4, 8, 4), 1.0)
    }

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
        Tensor::from_vec(&[c, h, w], data)
    }

    #[test]
    fn eye_box_mask_counts() {
        let m = build_mask(&two_boxes(), &MaskSpec::per_eye(0), 32, 32).unwrap();
        assert_eq!(m.sum(), 64.0);
        let m = build_mask(&two_boxes(), &MaskSpec::empty(), 32, 32).unwrap();
        assert_eq!(m.sum(), 0.0);
        let m = build_mask(&two_boxes(), &MaskSpec::union(0), 32, 32).unwrap();
        assert_eq!(m.sum(), 96.0);
    }

    #[test]
    fn corner_padding_is_clipped() {
        let ann = EyeAnnotation::new(Rect::new(0, 0, 3, 2), Rect::new(10, 10, 3, 3), 1.0);
        let m = build_mask(&ann, &MaskSpec::per_eye(2), 16, 16).unwrap();
        // Brute-force count over every pixel against both padded boxes.
        let mut expected = 0;
        for y in 0..16 {
            for x in 0..16 {
                let in_a = (-2..5).contains(&x) && (-2..4).contains(&y);
                let in_b = (8..15).contains(&x) && (8..15).contains(&y);
                if in_a || in_b {
                    expected += 1;
                }
            }
        }
        assert_eq!(m.sum(), expected as f64);
        assert_eq!(expected, 5 * 4 + 7 * 7);
    }

    #[test]
    fn boxes_outside_the_image_are_errors() {
        let ann = EyeAnnotation::new(Rect::new(40, 40, 3, 3), Rect::new(50, 40, 3, 3), 1.0);
        assert!(build_mask(&ann, &MaskSpec::per_eye(0), 32, 32).is_err());
    }

    #[test]
    fn apply_mask_extremes_and_pixelwise() {
        let img = random_image(3, 16, 16, 1);
        let zeros = Tensor::zeros(&[1, 16, 16]);
        assert_eq!(apply_mask(&img, &zeros).unwrap(), img);
        let ones = Tensor::full(&[1, 16, 16], 1.0);
        assert_eq!(apply_mask(&img, &ones).unwrap().max(), 0.0);
        let ann = EyeAnnotation::new(Rect::new(2, 2, 4, 3), Rect::new(9, 2, 4, 3), 1.0);
        let m = build_mask(&ann, &MaskSpec::per_eye(0), 16, 16).unwrap();
        let z = apply_mask(&img, &m).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let on = m.at(&[0, y, x]) == 1.0;
                    let expect = if on { 0.0 } else { img.at(&[c, y, x]) };
                    assert_eq!(z.at(&[c, y, x]), expect);
                }
            }
        }
        assert!(apply_mask(&img, &Tensor::zeros(&[1, 8, 16])).is_err());
    }

    #[test]
    fn composite_extremes_and_idempotence() {
        let g = random_image(3, 8, 8, 2);
        let o = random_image(3, 8, 8, 3);
        let ones = Tensor::full(&[1, 8, 8], 1.0);
        let zeros = Tensor::zeros(&[1, 8, 8]);
        assert_eq!(composite(&g, &o, &ones).unwrap(), g);
        assert_eq!(composite(&g, &o, &zeros).unwrap(), o);
        let m = build_mask(
            &EyeAnnotation::new(Rect::new(0, 0, 3, 3), Rect::new(5, 5, 2, 2), 1.0),
            &MaskSpec::per_eye(0),
            8,
            8,
        )
        .unwrap();
        let once = composite(&g, &o, &m).unwrap();
        assert_eq!(composite(&once, &o, &m).unwrap(), once);
        assert!(composite(&g, &Tensor::zeros(&[3, 8, 7]), &m).is_err());
    }

    #[test]
    fn local_box_arithmetic() {
        let r = local_box(&two_boxes(), 2, 64, 64).unwrap();
        assert_eq!(r, Rect::new(2, 2, 28, 8));
        let region = extract_local(&random_image(3, 64, 64, 4), &two_boxes(), 2, (8, 28)).unwrap();
        assert_eq!(region.crop_box, Rect::new(2, 2, 28, 8));
        assert_eq!(region.crop.shape(), &[3, 8, 28]);
    }

    #[test]
    fn local_crop_of_unmasked_composite_matches_original() {
        let g = random_image(3, 32, 32, 5);
        let o = random_image(3, 32, 32, 6);
        let c = composite(&g, &o, &Tensor::zeros(&[1, 32, 32])).unwrap();
        let a = extract_local(&c, &two_boxes(), 2, (16, 32)).unwrap();
        let b = extract_local(&o, &two_boxes(), 2, (16, 32)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_boxes_centre_the_crop() {
        let ann = EyeAnnotation::new(Rect::new(6, 10, 6, 4), Rect::new(20, 10, 6, 4), 1.0);
        let r = local_box(&ann, 3, 32, 32).unwrap();
        let union = ann.union();
        assert_eq!(2 * r.x + r.w, 2 * union.x + union.w);
    }

    #[test]
    fn degenerate_union_is_an_error() {
        let ann = EyeAnnotation {
            left_box: Rect::new(0, 0, 0, 0),
            right_box: Rect::new(0, 0, 0, 0),
            confidence: 1.0,
        };
        assert!(extract_local(&random_image(3, 8, 8, 0), &ann, 0, (4, 4)).is_err());
    }

    fn arb_annotation(size: i32) -> impl Strategy<Value = EyeAnnotation> {
        (1..size / 4, 1..size / 4, 0..size / 4, 1..size / 4, 1..size / 4, 0..size - 1).prop_map(
            move |(w1, h1, gap, w2, h2, y)| {
                let x1 = 0;
                let x2 = w1 + gap;
                EyeAnnotation::new(Rect::new(x1, y.min(size - h1), w1, h1), Rect::new(x2, y.min(size - h2), w2, h2), 1.0)
            },
        )
    }

    proptest! {
        #[test]
        fn masks_are_binary_and_round_trip(
            ann in arb_annotation(24),
            padding in 0u32..4,
            union in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let size = 24;
            let spec = if union { MaskSpec::union(padding) } else { MaskSpec::per_eye(padding) };
            let m = build_mask(&ann, &spec, size, size).unwrap();
            prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(&build_mask(&ann, &spec, size, size).unwrap(), &m);
            let img = random_image(3, size, size, seed);
            let z = apply_mask(&img, &m).unwrap();
            let back = composite(&z, &img, &m).unwrap();
            for c in 0..3 {
                for p in 0..size * size {
                    let idx = c * size * size + p;
                    if m.data()[p] == 0.0 {
                        prop_assert_eq!(back.data()[idx].to_bits(), img.data()[idx].to_bits());
                        prop_assert_eq!(z.data()[idx].to_bits(), img.data()[idx].to_bits());
                    } else {
                        prop_assert_eq!(z.data()[idx], 0.0);
                    }
                }
            }
        }

        #[test]
        fn local_box_is_translation_consistent(
            ann in arb_annotation(32),
            dx in -10i32..10,
            dy in -10i32..10,
            padding in 0u32..5,
        ) {
            let a = local_box_unclipped(&ann, padding).unwrap();
            let b = local_box_unclipped(&ann.translate(dx, dy), padding).unwrap();
            prop_assert_eq!(b, a.translate(dx, dy));
            prop_assert!(a.contains(&ann.left_box) && a.contains(&ann.right_box));
        }
    }
}
