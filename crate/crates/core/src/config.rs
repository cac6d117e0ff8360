//! TOML experiment configuration.
//!
//! ```toml
//! family = "reference"          # non-exemplar | reference | code
//! seed = 7
//! image_size = 64
//!
//! [data]
//! train_manifest = "data/manifest.jsonl"
//! held_out_identities = 50      # taken from the end when no validation manifest is given
//!
//! [run]
//! budget_images = 100000
//! output_dir = "runs/reference"
//!
//! [generator]                   # any GeneratorConfig field
//! base_channels = 32
//!
//! [compressor]                  # required for the code family
//! epochs = 20
//! ```
//!
//! The family fixes the generator variant, its input channels and the
//! discriminator's conditioning. Setting any of those keys to a value that
//! contradicts the family is an error. Relative paths are resolved against
//! the configuration file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compressor::CompressorConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::evaluation::{ClassifierConfig, EvalConfig};
use crate::generator::GeneratorConfig;
use crate::training::{ModelFamily, TrainingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_manifest: PathBuf,
    #[serde(default)]
    pub validation_manifest: Option<PathBuf>,
    #[serde(default)]
    pub held_out_identities: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub budget_images: u64,
    #[serde(default)]
    pub validate_every: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    /// Pre-trained compressor to use instead of training one (code family).
    #[serde(default)]
    pub compressor_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    #[serde(flatten)]
    pub metrics: EvalConfig,
    pub classifier: ClassifierConfig,
}

impl EvalSection {
    fn for_image_size(size: usize) -> Self {
        Self {
            metrics: EvalConfig::default(),
            classifier: ClassifierConfig::for_image_size(size),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self::for_image_size(64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub family: ModelFamily,
    pub seed: u64,
    pub image_size: usize,
    pub data: DataSection,
    pub run: RunSection,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub training: TrainingConfig,
    pub compressor: Option<CompressorConfig>,
    pub eval: EvalSection,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    family: ModelFamily,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_image_size")]
    image_size: usize,
    data: DataSection,
    run: RunSection,
    #[serde(default)]
    generator: Option<GeneratorConfig>,
    #[serde(default)]
    discriminator: Option<DiscriminatorConfig>,
    #[serde(default)]
    training: Option<TrainingConfig>,
    #[serde(default)]
    compressor: Option<CompressorConfig>,
    #[serde(default)]
    eval: Option<EvalSection>,
}

fn default_image_size() -> usize {
    64
}

/// Keys the family decides, with the value each family implies.
fn family_keys(family: ModelFamily) -> Vec<(&'static str, &'static str, toml::Value)> {
    let mut g = GeneratorConfig::default();
    let mut d = DiscriminatorConfig::default();
    family.apply(&mut g, &mut d);
    let variant = toml::Value::try_from(g.variant).expect("variant serialises");
    vec![
        ("generator", "variant", variant),
        ("generator", "input_channels", toml::Value::Integer(g.input_channels as i64)),
        ("discriminator", "with_reference", toml::Value::Boolean(d.with_reference)),
        ("discriminator", "code_fusion", toml::Value::Boolean(d.code_fusion)),
    ]
}

fn explicitly_set<'a>(doc: &'a toml::Value, section: &str, key: &str) -> Option<&'a toml::Value> {
    doc.get(section).and_then(|s| s.get(key))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |e: toml::de::Error| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        };
        let doc: toml::Value = toml::from_str(text).map_err(parse_err)?;
        let raw: Raw = toml::from_str(text).map_err(parse_err)?;
        let family = raw.family;
        for (section, key, want) in family_keys(family) {
            if let Some(got) = explicitly_set(&doc, section, key) {
                if *got != want {
                    return Err(Error::Config(format!(
                        "{section}.{key} = {got} contradicts family {}, which needs {want}",
                        family.name()
                    )));
                }
            }
        }
        let size = raw.image_size;
        let mut generator = raw.generator.unwrap_or_default();
        let mut discriminator = raw.discriminator.unwrap_or_default();
        family.apply(&mut generator, &mut discriminator);
        generator.image_size = size;
        discriminator.image_size = size;
        if explicitly_set(&doc, "discriminator", "local_height").is_none() {
            discriminator.local_height = size / 2;
        }
        if explicitly_set(&doc, "discriminator", "local_width").is_none() {
            discriminator.local_width = size;
        }
        let mut eval = raw.eval.unwrap_or_else(|| EvalSection::for_image_size(size));
        let local_set = doc.get("eval").and_then(|e| e.get("classifier")).and_then(|c| c.get("local"));
        if local_set.is_none() {
            eval.classifier.local = ClassifierConfig::for_image_size(size).local;
        }
        let mut training = raw.training.unwrap_or_default();
        let mut compressor = raw.compressor;
        // One master seed; each component gets its own stream.
        training.seed = raw.seed;
        generator.seed = raw.seed.wrapping_add(1);
        discriminator.seed = raw.seed.wrapping_add(2);
        if let Some(c) = compressor.as_mut() {
            c.seed = raw.seed.wrapping_add(3);
        }
        eval.classifier.seed = raw.seed.wrapping_add(4);
        let mut cfg = Self {
            family,
            seed: raw.seed,
            image_size: size,
            data: raw.data,
            run: raw.run,
            generator,
            discriminator,
            training,
            compressor: compressor.take(),
            eval,
        };
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.data.train_manifest);
        if let Some(v) = self.data.validation_manifest.as_mut() {
            fix(v);
        }
        fix(&mut self.run.output_dir);
        if let Some(c) = self.run.compressor_checkpoint.as_mut() {
            fix(c);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ModelFamily::of(&self.generator, &self.discriminator)? != self.family {
            return Err(Error::Config("generator and discriminator do not match the family".into()));
        }
        if self.family == ModelFamily::Code && self.compressor.is_none() {
            return Err(Error::Config("the code family needs a [compressor] section".into()));
        }
        if self.family != ModelFamily::Code && self.compressor.is_some() {
            return Err(Error::Config(format!(
                "a [compressor] section is only used by the code family, not {}",
                self.family.name()
            )));
        }
        if self.run.budget_images == 0 {
            return Err(Error::Config("run.budget_images must be positive".into()));
        }
        if self.data.validation_manifest.is_none() && self.data.held_out_identities == 0 && self.run.validate_every > 0 {
            return Err(Error::Config(
                "validation needs data.validation_manifest or data.held_out_identities".into(),
            ));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.training.validate()?;
        if let Some(c) = &self.compressor {
            c.validate()?;
        }
        Ok(())
    }
}
