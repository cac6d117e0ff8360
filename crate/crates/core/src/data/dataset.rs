use std::collections::BTreeSet;
use std::path::Path;

use super::image_io::load_image;
use super::manifest::{load_manifest, Rejection};
use super::synthetic::{SyntheticSidecar, SIDECAR_FILE};
use super::IdentityRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identity records with their images decoded in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    records: Vec<IdentityRecord>,
    images: Vec<Vec<Tensor>>,
    sidecar: Option<SyntheticSidecar>,
}

impl Dataset {
    pub fn new(records: Vec<IdentityRecord>, images: Vec<Vec<Tensor>>, sidecar: Option<SyntheticSidecar>) -> Self {
        assert_eq!(records.len(), images.len());
        Self {
            records,
            images,
            sidecar,
        }
    }

    /// Loads a manifest and every image it names. Identities whose boxes do
    /// not fit their images join the manifest's rejections. A synthetic
    /// sidecar next to the manifest is picked up automatically.
    pub fn load(manifest: &Path) -> Result<(Self, Vec<Rejection>)> {
        let load = load_manifest(manifest)?;
        let mut rejections = load.rejections;
        let mut records = Vec::new();
        let mut images = Vec::new();
        let mut size: Option<(usize, usize)> = None;
        'identity: for record in load.records {
            let mut faces = Vec::with_capacity(record.images.len());
            for entry in &record.images {
                let img = load_image(&load.base_dir.join(&entry.path))?;
                let (_, h, w) = img.dims3();
                match size {
                    None => size = Some((h, w)),
                    Some(s) if s != (h, w) => {
                        return Err(Error::Validation(format!(
                            "{} is {w}x{h}, expected {}x{}",
                            entry.path.display(),
                            s.1,
                            s.0
                        )))
                    }
                    _ => {}
                }
                if let Err(e) = entry.annotation.validate_for(w, h) {
                    rejections.push(Rejection {
                        identity_id: record.identity_id.clone(),
                        reason: format!("{}: {e}", entry.path.display()),
                    });
                    continue 'identity;
                }
                faces.push(img);
            }
            records.push(record);
            images.push(faces);
        }
        let sidecar_path = load.base_dir.join(SIDECAR_FILE);
        let sidecar = if sidecar_path.exists() {
            let mut sidecar = SyntheticSidecar::load(&sidecar_path)?;
            let ids: BTreeSet<&str> = records.iter().map(|r| r.identity_id.as_str()).collect();
            sidecar.identities.retain(|i| ids.contains(i.identity_id.as_str()));
            Some(sidecar)
        } else {
            None
        };
        Ok((Self::new(records, images, sidecar), rejections))
    }

    pub fn records(&self) -> &[IdentityRecord] {
        &self.records
    }

    pub fn images(&self) -> &[Vec<Tensor>] {
        &self.images
    }

    pub fn image(&self, identity: usize, index: usize) -> &Tensor {
        &self.images[identity][index]
    }

    pub fn sidecar(&self) -> Option<&SyntheticSidecar> {
        self.sidecar.as_ref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_count(&self) -> usize {
        self.images.iter().map(Vec::len).sum()
    }

    /// `(height, width)` shared by every image.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first()?.first().map(|t| {
            let (_, h, w) = t.dims3();
            (h, w)
        })
    }

    pub fn identity_ids(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.identity_id.clone()).collect()
    }

    /// Keeps the identities at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let records: Vec<IdentityRecord> = indices.iter().map(|&i| self.records[i].clone()).collect();
        let images = indices.iter().map(|&i| self.images[i].clone()).collect();
        let sidecar = self.sidecar.as_ref().map(|s| {
            let mut s = s.clone();
            s.identities = records
                .iter()
                .filter_map(|r| s.identity(&r.identity_id).cloned())
                .collect();
            s
        });
        Dataset::new(records, images, sidecar)
    }

    /// Splits off the last `held_out` identities as a disjoint validation set.
    pub fn split(&self, held_out: usize) -> (Dataset, Dataset) {
        let n = self.len();
        let cut = n.saturating_sub(held_out);
        let train: Vec<usize> = (0..cut).collect();
        let val: Vec<usize> = (cut..n).collect();
        (self.subset(&train), self.subset(&val))
    }
}
