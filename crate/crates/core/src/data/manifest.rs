//! Newline-delimited JSON manifests: one image per line.
//!
//! ```text
//! {"identity_id":"id00001","image_path":"images/id00001_0.png","left_box":[9,11,10,6],"right_box":[35,11,10,6],"confidence":1.0}
//! ```
//!
//! Image paths are resolved relative to the manifest's directory. Lines may
//! carry an optional `metadata` object of string values, merged per identity.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EyeAnnotation, IdentityRecord, ImageEntry, MIN_IMAGES_PER_IDENTITY};
use crate::error::{Error, Result};
use crate::geometry::Rect;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub identity_id: String,
    pub image_path: PathBuf,
    pub left_box: Rect,
    pub right_box: Rect,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// An identity excluded from a load, with the reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub identity_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestLoad {
    pub records: Vec<IdentityRecord>,
    pub rejections: Vec<Rejection>,
    /// Directory image paths were resolved against.
    pub base_dir: PathBuf,
}

/// Parses a manifest. Malformed lines are hard errors; identities that break
/// a dataset invariant land in [`ManifestLoad::rejections`] instead.
pub fn load_manifest(path: &Path) -> Result<ManifestLoad> {
    let file = std::fs::File::open(path)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<(usize, ManifestEntry)>, BTreeMap<String, String>)> =
        HashMap::new();

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let slot = groups.entry(entry.identity_id.clone()).or_insert_with(|| {
            order.push(entry.identity_id.clone());
            (Vec::new(), BTreeMap::new())
        });
        slot.1.extend(entry.metadata.clone());
        slot.0.push((lineno, entry));
    }

    let mut records = Vec::new();
    let mut rejections = Vec::new();
    for id in order {
        let (entries, metadata) = groups.remove(&id).expect("grouped above");
        let invalid = entries.iter().find_map(|(lineno, e)| {
            EyeAnnotation::new(e.left_box, e.right_box, e.confidence)
                .validate()
                .err()
                .map(|err| format!("line {lineno}: {err}"))
        });
        if let Some(reason) = invalid {
            rejections.push(Rejection {
                identity_id: id,
                reason,
            });
            continue;
        }
        if entries.len() < MIN_IMAGES_PER_IDENTITY {
            rejections.push(Rejection {
                identity_id: id,
                reason: format!(
                    "min images: {} present, at least {MIN_IMAGES_PER_IDENTITY} required",
                    entries.len()
                ),
            });
            continue;
        }
        let images = entries
            .into_iter()
            .map(|(_, e)| ImageEntry {
                path: e.image_path,
                annotation: EyeAnnotation::new(e.left_box, e.right_box, e.confidence),
            })
            .collect();
        records.push(IdentityRecord {
            identity_id: id,
            images,
            metadata,
        });
    }
    Ok(ManifestLoad {
        records,
        rejections,
        base_dir,
    })
}

/// Writes one line per image, identities in order.
pub fn write_manifest(path: &Path, records: &[IdentityRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        for (k, img) in r.images.iter().enumerate() {
            let entry = ManifestEntry {
                identity_id: r.identity_id.clone(),
                image_path: img.path.clone(),
                left_box: img.annotation.left_box,
                right_box: img.annotation.right_box,
                confidence: img.annotation.confidence,
                metadata: if k == 0 { r.metadata.clone() } else { BTreeMap::new() },
            };
            serde_json::to_writer(&mut out, &entry)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}
