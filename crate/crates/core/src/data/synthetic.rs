//! Procedural faces with known per-identity eye traits.
//!
//! Each identity draws an iris colour, an eye aspect ratio, a skin tone and an
//! inter-eye spacing. Every image of the identity then varies pose offset,
//! illumination and background. Eyes are always open, and the eye boxes come
//! straight from the renderer.
//!
//! Procedural ranges (in units of the image side `S` where noted):
//!
//! | trait            | range               |
//! |------------------|---------------------|
//! | iris colour      | `[0.05, 0.95]^3`    |
//! | eye aspect (h/w) | `[0.45, 0.75]`      |
//! | eye spacing      | `[0.36, 0.44] * S`  |
//! | eye half-width   | `0.11 * S` (fixed)  |
//! | illumination     | `[0.70, 1.05]`      |
//! | pose offset      | `±pose_jitter * S`  |

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image_io::{quantize, save_image};
use super::manifest::write_manifest;
use super::{Dataset, EyeAnnotation, IdentityRecord, ImageEntry};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

pub const SIDECAR_FILE: &str = "synthetic.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub const IRIS_RANGE: (f64, f64) = (0.05, 0.95);
pub const EYE_SHAPE_RANGE: (f64, f64) = (0.45, 0.75);
pub const EYE_SPACING_RANGE: (f64, f64) = (0.36, 0.44);
pub const EYE_HALF_WIDTH: f64 = 0.14;
pub const ILLUMINATION_RANGE: (f64, f64) = (0.70, 1.05);
pub const IRIS_TO_EYE_HEIGHT: f64 = 0.9;
pub const PUPIL_TO_IRIS: f64 = 0.3;
pub const SCLERA: [f64; 3] = [0.93, 0.93, 0.90];
pub const PUPIL: [f64; 3] = [0.05, 0.05, 0.05];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Floor on the pairwise L2 distance between identity iris colours.
    #[serde(default = "default_min_iris_distance")]
    pub min_iris_distance: f64,
    /// Maximum pose offset as a fraction of the image side.
    #[serde(default = "default_pose_jitter")]
    pub pose_jitter: f64,
    /// Identity ids are this prefix followed by a five-digit index.
    #[serde(default = "default_id_prefix")]
    pub id_prefix: String,
}

fn default_id_prefix() -> String {
    "syn".into()
}

fn default_min_iris_distance() -> f64 {
    0.05
}

fn default_pose_jitter() -> f64 {
    1.0 / 32.0
}

impl SyntheticConfig {
    pub fn new(num_identities: usize, images_per_identity: usize, image_size: usize, seed: u64) -> Self {
        Self {
            num_identities,
            images_per_identity,
            image_size,
            seed,
            min_iris_distance: default_min_iris_distance(),
            pose_jitter: default_pose_jitter(),
            id_prefix: default_id_prefix(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Config(format!(
                "need at least 2 identities, got {}",
                self.num_identities
            )));
        }
        if self.images_per_identity < super::MIN_IMAGES_PER_IDENTITY {
            return Err(Error::Config(format!(
                "need at least {} images per identity, got {}",
                super::MIN_IMAGES_PER_IDENTITY,
                self.images_per_identity
            )));
        }
        if self.id_prefix.is_empty() || !self.id_prefix.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::Config(format!(
                "identity prefix {:?} must be non-empty ASCII letters, digits, '_' or '-'",
                self.id_prefix
            )));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image size {} is too small to contain two eye boxes (minimum 32)",
                self.image_size
            )));
        }
        if !(0.0..=0.05).contains(&self.pose_jitter) {
            return Err(Error::Config(format!(
                "pose jitter {} outside [0, 0.05]",
                self.pose_jitter
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentitySpec {
    pub iris_color: [f64; 3],
    /// Eye height over eye width.
    pub eye_shape: f64,
    pub skin_tone: [f64; 3],
    /// Distance between eye centres in pixels.
    pub eye_spacing: f64,
    pub rng_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeGeometry {
    pub cx: f64,
    pub cy: f64,
    pub half_width: f64,
    pub half_height: f64,
    pub iris_radius: f64,
    pub pupil_radius: f64,
}

impl EyeGeometry {
    fn bounding_box(&self) -> Rect {
        let x0 = (self.cx - self.half_width).floor() as i32;
        let x1 = (self.cx + self.half_width).ceil() as i32;
        let y0 = (self.cy - self.half_height).floor() as i32;
        let y1 = (self.cy + self.half_height).ceil() as i32;
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Pixels rendered with the iris colour (centres inside the iris disk and
    /// outside the pupil), as `(x, y)` pairs.
    pub fn iris_pixels(&self, size: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let r = self.iris_radius.ceil() as i64 + 1;
        let (cx, cy) = (self.cx.floor() as i64, self.cy.floor() as i64);
        for y in (cy - r).max(0)..=(cy + r).min(size as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(size as i64 - 1) {
                let d = ((x as f64 + 0.5 - self.cx).powi(2) + (y as f64 + 0.5 - self.cy).powi(2)).sqrt();
                if d <= self.iris_radius && d > self.pupil_radius {
                    out.push((x as usize, y as usize));
                }
            }
        }
        out
    }

    fn in_sclera(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / self.half_width;
        let v = (y - self.cy) / self.half_height;
        u * u + v * v <= 1.0
    }
}

/// Per-image rendering parameters, kept so evaluation can locate the iris.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderInfo {
    pub offset: [f64; 2],
    pub illumination: f64,
    pub background: [f64; 3],
    pub left_eye: EyeGeometry,
    pub right_eye: EyeGeometry,
    /// The iris colour exactly as stored in the 8-bit image.
    pub iris_rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub identity_id: String,
    pub spec: SyntheticIdentitySpec,
    pub renders: Vec<RenderInfo>,
}

/// Ground-truth traits written next to a synthetic manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSidecar {
    pub config: SyntheticConfig,
    pub identities: Vec<SyntheticIdentity>,
}

impl SyntheticSidecar {
    pub fn identity(&self, id: &str) -> Option<&SyntheticIdentity> {
        self.identities.iter().find(|i| i.identity_id == id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub records: Vec<IdentityRecord>,
    pub images: Vec<Vec<Tensor>>,
    pub sidecar: SyntheticSidecar,
}

impl SyntheticDataset {
    pub fn image_count(&self) -> usize {
        self.images.iter().map(Vec::len).sum()
    }

    /// Writes `images/*.png`, `manifest.jsonl` and `synthetic.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.join("images"))?;
        for (record, images) in self.records.iter().zip(&self.images) {
            for (entry, img) in record.images.iter().zip(images) {
                save_image(&dir.join(&entry.path), img)?;
            }
        }
        let manifest = dir.join(MANIFEST_FILE);
        write_manifest(&manifest, &self.records)?;
        let sidecar = serde_json::to_vec_pretty(&self.sidecar)?;
        std::fs::write(dir.join(SIDECAR_FILE), sidecar)?;
        Ok(manifest)
    }

    pub fn into_dataset(self) -> Dataset {
        Dataset::new(self.records, self.images, Some(self.sidecar))
    }
}

fn sample_range<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    rng.gen_range(range.0..=range.1)
}

fn l2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn draw_specs(config: &SyntheticConfig) -> Result<Vec<SyntheticIdentitySpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.image_size as f64;
    let mut specs: Vec<SyntheticIdentitySpec> = Vec::with_capacity(config.num_identities);
    for _ in 0..config.num_identities {
        let mut iris = None;
        for _ in 0..10_000 {
            let candidate = [
                sample_range(&mut rng, IRIS_RANGE),
                sample_range(&mut rng, IRIS_RANGE),
                sample_range(&mut rng, IRIS_RANGE),
            ];
            if specs
                .iter()
                .all(|s| l2(&s.iris_color, &candidate) >= config.min_iris_distance)
            {
                iris = Some(candidate);
                break;
            }
        }
        let iris_color = iris.ok_or_else(|| {
            Error::Config(format!(
                "cannot place {} iris colours at least {} apart",
                config.num_identities, config.min_iris_distance
            ))
        })?;
        let red = rng.gen_range(0.55..=0.95);
        let green = red * rng.gen_range(0.70..=0.85);
        let blue = green * rng.gen_range(0.70..=0.90);
        specs.push(SyntheticIdentitySpec {
            iris_color,
            eye_shape: sample_range(&mut rng, EYE_SHAPE_RANGE),
            skin_tone: [red, green, blue],
            eye_spacing: sample_range(&mut rng, EYE_SPACING_RANGE) * size,
            rng_seed: rng.gen(),
        });
    }
    Ok(specs)
}

fn eye_geometry(spec: &SyntheticIdentitySpec, size: f64, offset: [f64; 2], sign: f64) -> EyeGeometry {
    let half_width = EYE_HALF_WIDTH * size;
    let half_height = half_width * spec.eye_shape;
    let iris_radius = IRIS_TO_EYE_HEIGHT * half_height;
    EyeGeometry {
        cx: size / 2.0 + offset[0] + sign * spec.eye_spacing / 2.0,
        cy: 0.42 * size + offset[1],
        half_width,
        half_height,
        iris_radius,
        pupil_radius: PUPIL_TO_IRIS * iris_radius,
    }
}

fn draw_render<R: Rng>(rng: &mut R, spec: &SyntheticIdentitySpec, config: &SyntheticConfig) -> RenderInfo {
    let size = config.image_size as f64;
    let jitter = config.pose_jitter * size;
    let offset = [rng.gen_range(-jitter..=jitter), rng.gen_range(-jitter..=jitter)];
    let illumination = sample_range(rng, ILLUMINATION_RANGE);
    let background = [rng.gen_range(0.05..0.45), rng.gen_range(0.05..0.45), rng.gen_range(0.05..0.45)];
    let iris_rgb = spec
        .iris_color
        .map(|c| quantize(c * illumination) as f64 / 255.0);
    RenderInfo {
        offset,
        illumination,
        background,
        left_eye: eye_geometry(spec, size, offset, -1.0),
        right_eye: eye_geometry(spec, size, offset, 1.0),
        iris_rgb,
    }
}

/// Rasterises one face. Pure function of its arguments.
pub fn render_face(spec: &SyntheticIdentitySpec, info: &RenderInfo, image_size: usize) -> Tensor {
    let s = image_size as f64;
    let (hx, hy) = (s / 2.0 + info.offset[0], 0.52 * s + info.offset[1]);
    let (rx, ry) = (0.36 * s, 0.46 * s);
    let (mx, my) = (s / 2.0 + info.offset[0], 0.74 * s + info.offset[1]);
    let (mrx, mry) = (0.12 * s, 0.03 * s);
    let mut data = vec![0.0; 3 * image_size * image_size];
    let plane = image_size * image_size;
    for py in 0..image_size {
        for px in 0..image_size {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let fade = 1.0 - 0.4 * y / s;
            let mut color = info.background.map(|b| b * fade);
            if ((x - hx) / rx).powi(2) + ((y - hy) / ry).powi(2) <= 1.0 {
                let shade = 1.0 - 0.12 * (y - hy) / ry;
                color = spec.skin_tone.map(|c| c * shade);
                if ((x - mx) / mrx).powi(2) + ((y - my) / mry).powi(2) <= 1.0 {
                    color = [
                        spec.skin_tone[0] * 0.75,
                        spec.skin_tone[1] * 0.45,
                        spec.skin_tone[2] * 0.45,
                    ];
                }
                for eye in [&info.left_eye, &info.right_eye] {
                    if eye.in_sclera(x, y) {
                        let d = ((x - eye.cx).powi(2) + (y - eye.cy).powi(2)).sqrt();
                        color = if d <= eye.pupil_radius {
                            PUPIL
                        } else if d <= eye.iris_radius {
                            spec.iris_color
                        } else {
                            SCLERA
                        };
                    }
                }
            }
            for c in 0..3 {
                let v = quantize(color[c] * info.illumination);
                data[c * plane + py * image_size + px] = v as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, image_size, image_size], data)
}

pub fn annotation_for(info: &RenderInfo) -> EyeAnnotation {
    EyeAnnotation::new(info.left_eye.bounding_box(), info.right_eye.bounding_box(), 1.0)
}

/// Renders `num_identities x images_per_identity` faces. Identical
/// configurations produce identical datasets.
pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let specs = draw_specs(config)?;
    let mut records = Vec::with_capacity(specs.len());
    let mut images = Vec::with_capacity(specs.len());
    let mut identities = Vec::with_capacity(specs.len());
    for (k, spec) in specs.into_iter().enumerate() {
        let identity_id = format!("{}{k:05}", config.id_prefix);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let renders: Vec<RenderInfo> = (0..config.images_per_identity)
            .map(|_| draw_render(&mut rng, &spec, config))
            .collect();
        let faces: Vec<Tensor> = renders
            .iter()
            .map(|info| render_face(&spec, info, config.image_size))
            .collect();
        let entries = renders
            .iter()
            .enumerate()
            .map(|(j, info)| {
                let annotation = annotation_for(info);
                annotation.validate_for(config.image_size, config.image_size)?;
                Ok(ImageEntry {
                    path: PathBuf::from(format!("images/{identity_id}_{j}.png")),
                    annotation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(IdentityRecord {
            identity_id: identity_id.clone(),
            images: entries,
            metadata: [("source".to_string(), "synthetic".to_string())].into(),
        });
        images.push(faces);
        identities.push(SyntheticIdentity {
            identity_id,
            spec,
            renders,
        });
    }
    Ok(SyntheticDataset {
        records,
        images,
        sidecar: SyntheticSidecar {
            config: config.clone(),
            identities,
        },
    })
}
