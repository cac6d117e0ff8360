use super::EyeAnnotation;
use crate::compressor::EyeCode;
use crate::error::{check_shape, Result};
use crate::masking::{apply_mask, build_mask, MaskSpec};
use crate::tensor::Tensor;

/// One assembled example: the image to fill, what was removed, and the
/// exemplar information for the same identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// Ground truth `[3, H, W]`.
    pub target: Tensor,
    /// `target` with the masked pixels zeroed.
    pub masked_input: Tensor,
    /// `[1, H, W]`, 1 where pixels were removed.
    pub mask: Tensor,
    /// A different image of the same identity.
    pub reference: Tensor,
    /// `[1, H, W]`, 1 over the reference's eye boxes.
    pub reference_eye_mask: Tensor,
    pub code: Option<EyeCode>,
    pub target_annotation: EyeAnnotation,
    pub reference_annotation: EyeAnnotation,
}

impl TrainingSample {
    pub fn image_size(&self) -> (usize, usize) {
        let (_, h, w) = self.target.dims3();
        (h, w)
    }
}

pub fn assemble_sample(
    target: &Tensor,
    reference: &Tensor,
    target_annotation: &EyeAnnotation,
    reference_annotation: &EyeAnnotation,
    mask_spec: &MaskSpec,
) -> Result<TrainingSample> {
    check_shape(target.shape(), reference.shape())?;
    let (_, h, w) = target.dims3();
    target_annotation.validate_for(w, h)?;
    reference_annotation.validate_for(w, h)?;
    let mask = build_mask(target_annotation, mask_spec, h, w)?;
    let masked_input = apply_mask(target, &mask)?;
    let reference_eye_mask = build_mask(reference_annotation, &MaskSpec::per_eye(0), h, w)?;
    Ok(TrainingSample {
        target: target.clone(),
        masked_input,
        mask,
        reference: reference.clone(),
        reference_eye_mask,
        code: None,
        target_annotation: *target_annotation,
        reference_annotation: *reference_annotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;

    fn ramp(offset: f64) -> Tensor {
        Tensor::from_vec(
            &[3, 32, 32],
            (0..3 * 32 * 32).map(|i| ((i as f64 * 0.013 + offset).sin() + 1.0) / 2.0).collect(),
        )
    }

    fn ann() -> EyeAnnotation {
        EyeAnnotation::new(Rect::new(4, 4, 8, 4), Rect::new(20, 4, 8, 4), 1.0)
    }

    #[test]
    fn empty_mask_leaves_target_untouched() {
        let s = assemble_sample(&ramp(0.0), &ramp(1.0), &ann(), &ann(), &MaskSpec::empty()).unwrap();
        assert_eq!(s.masked_input, s.target);
        assert_eq!(s.mask.sum(), 0.0);
    }

    #[test]
    fn eye_box_mask_zeroes_exactly_the_boxes() {
        let s = assemble_sample(&ramp(0.0), &ramp(1.0), &ann(), &ann(), &MaskSpec::per_eye(0)).unwrap();
        let zeroed = s
            .masked_input
            .data()
            .iter()
            .zip(s.target.data())
            .filter(|(z, t)| *z != *t)
            .count();
        // Every masked pixel changed in every channel (the ramp has no zeros).
        assert_eq!(zeroed, 3 * 64);
        assert_eq!(s.mask.sum(), 64.0);
    }

    #[test]
    fn reference_eye_mask_counts_both_boxes() {
        let s = assemble_sample(&ramp(0.0), &ramp(1.0), &ann(), &ann(), &MaskSpec::per_eye(3)).unwrap();
        assert_eq!(s.reference_eye_mask.sum(), 64.0);
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let small = Tensor::zeros(&[3, 16, 16]);
        assert!(assemble_sample(&ramp(0.0), &small, &ann(), &ann(), &MaskSpec::default()).is_err());
    }
}
