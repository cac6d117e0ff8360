//! Identity-grouped datasets: manifests, the procedural face generator,
//! per-epoch pairing and training-sample assembly.

mod dataset;
mod image_io;
mod manifest;
mod pairs;
mod sample;
mod synthetic;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;

pub use dataset::Dataset;
pub use image_io::{load_image, save_image};
pub use manifest::{load_manifest, write_manifest, ManifestEntry, ManifestLoad, Rejection};
pub use pairs::{make_pair_epoch, PairEpoch, PairIndex, PairMode};
pub use sample::{assemble_sample, TrainingSample};
pub use synthetic::{
    generate_synthetic_dataset, EyeGeometry, RenderInfo, SyntheticConfig, SyntheticDataset,
    SyntheticIdentity, SyntheticIdentitySpec, SyntheticSidecar, EYE_SHAPE_RANGE, PUPIL, SCLERA, SIDECAR_FILE,
};

/// Minimum number of images an identity needs to be usable.
pub const MIN_IMAGES_PER_IDENTITY: usize = 3;

/// Pixel boxes around both eyes of one face image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeAnnotation {
    pub left_box: Rect,
    pub right_box: Rect,
    pub confidence: f64,
}

impl EyeAnnotation {
    pub fn new(left_box: Rect, right_box: Rect, confidence: f64) -> Self {
        Self {
            left_box,
            right_box,
            confidence,
        }
    }

    /// Checks the intrinsic invariants: positive extents, disjoint boxes and
    /// a unit-interval confidence.
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("left", &self.left_box), ("right", &self.right_box)] {
            if b.w <= 0 || b.h <= 0 {
                return Err(Error::Annotation(format!("{name} box {b:?} has non-positive extent")));
            }
        }
        if self.left_box.intersects(&self.right_box) {
            return Err(Error::Annotation(format!(
                "eye boxes overlap: {:?} and {:?}",
                self.left_box, self.right_box
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Annotation(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus containment in a `width x height` image.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        self.validate()?;
        for b in [&self.left_box, &self.right_box] {
            if !b.inside_image(width, height) {
                return Err(Error::Annotation(format!(
                    "box {b:?} exceeds {width}x{height} image"
                )));
            }
        }
        Ok(())
    }

    pub fn union(&self) -> Rect {
        self.left_box.union(&self.right_box)
    }

    pub fn translate(&self, dx: i32, dy: i32) -> Self {
        Self {
            left_box: self.left_box.translate(dx, dy),
            right_box: self.right_box.translate(dx, dy),
            confidence: self.confidence,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub path: PathBuf,
    pub annotation: EyeAnnotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub identity_id: String,
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_rejects_overlap_and_bad_extent() {
        let ok = EyeAnnotation::new(Rect::new(4, 4, 8, 4), Rect::new(20, 4, 8, 4), 0.9);
        assert!(ok.validate_for(32, 32).is_ok());
        assert!(ok.validate_for(24, 32).is_err());
        let overlap = EyeAnnotation::new(Rect::new(4, 4, 8, 4), Rect::new(10, 4, 8, 4), 1.0);
        assert!(overlap.validate().is_err());
        let flat = EyeAnnotation::new(Rect::new(4, 4, 8, 0), Rect::new(20, 4, 8, 4), 1.0);
        assert!(flat.validate().is_err());
        let conf = EyeAnnotation::new(Rect::new(4, 4, 8, 4), Rect::new(20, 4, 8, 4), 1.5);
        assert!(conf.validate().is_err());
    }
}
