//! Feature extractors for FID and the class head for the inception score.
//!
//! The default extractor is a small CNN trained on the eye region of
//! synthetic faces to predict an attribute class (iris hue bucket x eye
//! shape bucket). Its penultimate layer is the embedding. The compressor
//! encoder can be used instead.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::compressor::Compressor;
use crate::data::{Dataset, EyeAnnotation, SyntheticIdentitySpec, EYE_SHAPE_RANGE};
use crate::error::{Error, Result};
use crate::masking::{local_plan, LocalSpec};
use crate::nn::{Adam, AdamConfig, Conv, ConvGeom, Dense, ParamBuilder, ParamSet, Tape, Var};
use crate::tensor::Tensor;

pub const HUE_BUCKETS: usize = 5;
pub const SHAPE_BUCKETS: usize = 2;
pub const ATTRIBUTE_CLASSES: usize = HUE_BUCKETS * SHAPE_BUCKETS;
const CHECKPOINT_KIND: &str = "attribute-classifier";

/// Deterministic image-to-vector map used by FID.
pub trait FeatureExtractor {
    fn name(&self) -> String;
    fn embedding_dim(&self) -> usize;
    /// One embedding per `(image, eye annotation)` pair.
    fn embed(&self, items: &[(&Tensor, &EyeAnnotation)]) -> Result<Vec<Vec<f64>>>;
}

/// Extractor with a class head, for the inception score.
pub trait Classifier {
    fn class_count(&self) -> usize;
    fn probabilities(&self, items: &[(&Tensor, &EyeAnnotation)]) -> Result<Vec<Vec<f64>>>;
}

/// Hue in `[0, 1)` of an RGB colour.
pub fn hue(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h / 6.0).rem_euclid(1.0)
}

/// Attribute class of a synthetic identity: `hue_bucket * 2 + shape_bucket`.
pub fn attribute_class(spec: &SyntheticIdentitySpec) -> usize {
    let h = ((hue(spec.iris_color) * HUE_BUCKETS as f64) as usize).min(HUE_BUCKETS - 1);
    let mid = (EYE_SHAPE_RANGE.0 + EYE_SHAPE_RANGE.1) / 2.0;
    h * SHAPE_BUCKETS + usize::from(spec.eye_shape >= mid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub base_channels: usize,
    pub embedding_dim: usize,
    pub local: LocalSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            embedding_dim: 16,
            local: LocalSpec::default(),
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn for_image_size(size: usize) -> Self {
        Self {
            local: LocalSpec::for_image_size(size),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.local.out_height % 8 != 0 || self.local.out_width % 8 != 0 || self.local.out_height == 0 {
            return Err(Error::Config("classifier crop sides must be positive multiples of 8".into()));
        }
        if self.base_channels == 0 || self.embedding_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("classifier sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttributeClassifier {
    config: ClassifierConfig,
    params: ParamSet,
    convs: [Conv; 3],
    embed: Dense,
    logits: Dense,
}

impl AttributeClassifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let mut pb = ParamBuilder::new(config.seed);
        let g = ConvGeom::same(3, 2, 1);
        let convs = [
            pb.conv("conv1", 3, b, g),
            pb.conv("conv2", b, 2 * b, g),
            pb.conv("conv3", 2 * b, 2 * b, g),
        ];
        let flat = 2 * b * (config.local.out_height / 8) * (config.local.out_width / 8);
        let embed = pb.dense("embed", flat, config.embedding_dim);
        let logits = pb.dense("logits", config.embedding_dim, ATTRIBUTE_CLASSES);
        Ok(Self {
            params: pb.finish(),
            config,
            convs,
            embed,
            logits,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// `(embedding, logits)` for a batch of local crops.
    fn forward(&self, tape: &mut Tape, p: &[Var], crops: Var) -> (Var, Var) {
        let mut h = crops;
        for c in &self.convs {
            h = c.forward(tape, p, h);
            h = tape.elu(h);
        }
        let h = tape.flatten(h);
        let e = self.embed.forward(tape, p, h);
        let e = tape.elu(e);
        let l = self.logits.forward(tape, p, e);
        (e, l)
    }

    /// Bilinear eye-region crops `[N, 3, h, w]`.
    pub fn crops(&self, items: &[(&Tensor, &EyeAnnotation)]) -> Result<Tensor> {
        let (oh, ow) = (self.config.local.out_height, self.config.local.out_width);
        let mut data = Vec::with_capacity(items.len() * 3 * oh * ow);
        for (img, ann) in items {
            let (c, h, w) = img.dims3();
            if c != 3 {
                return Err(Error::Shape {
                    expected: vec![3, h, w],
                    actual: img.shape().to_vec(),
                });
            }
            let (_, plan) = local_plan(ann, self.config.local.padding_for(ann), h, w, (oh, ow))?;
            let mut out = vec![0.0; 3 * oh * ow];
            plan.apply(img.data(), 3, &mut out);
            data.extend(out);
        }
        Ok(Tensor::from_vec(&[items.len(), 3, oh, ow], data))
    }

    fn run(&self, items: &[(&Tensor, &EyeAnnotation)]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut embeddings = Vec::with_capacity(items.len());
        let mut probs = Vec::with_capacity(items.len());
        // Fixed chunking; every row is computed independently of the others.
        for chunk in items.chunks(64) {
            let crops = self.crops(chunk)?;
            let mut tape = Tape::new();
            let p = tape.bind(&self.params, false);
            let x = tape.constant(crops);
            let (e, l) = self.forward(&mut tape, &p, x);
            let (ev, lv) = (tape.value(e), tape.value(l));
            if !ev.all_finite() || !lv.all_finite() {
                return Err(Error::NonFinite {
                    context: "classifier activations".into(),
                });
            }
            let d = self.config.embedding_dim;
            for i in 0..chunk.len() {
                embeddings.push(ev.data()[i * d..(i + 1) * d].to_vec());
                probs.push(softmax(&lv.data()[i * ATTRIBUTE_CLASSES..(i + 1) * ATTRIBUTE_CLASSES]));
            }
        }
        Ok((embeddings, probs))
    }

    /// Fraction of items whose arg-max class equals the label.
    pub fn accuracy(&self, items: &[(&Tensor, &EyeAnnotation)], labels: &[usize]) -> Result<f64> {
        let probs = self.probabilities(items)?;
        let hits = probs
            .iter()
            .zip(labels)
            .filter(|(p, &l)| {
                let best = p
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0;
                best == l
            })
            .count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set("config", &self.config)?;
        ck.push_params("classifier", &self.params);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut c = Self::new(ck.get("config")?)?;
        ck.load_params("classifier", &mut c.params)?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Images, annotations and attribute labels of a synthetic dataset.
pub fn labelled_items(dataset: &Dataset) -> Result<Vec<(Tensor, EyeAnnotation, usize)>> {
    let sidecar = dataset
        .sidecar()
        .ok_or_else(|| Error::Validation("attribute labels need the synthetic sidecar".into()))?;
    let mut out = Vec::new();
    for (record, images) in dataset.records().iter().zip(dataset.images()) {
        let identity = sidecar
            .identity(&record.identity_id)
            .ok_or_else(|| Error::Validation(format!("no synthetic spec for {}", record.identity_id)))?;
        let label = attribute_class(&identity.spec);
        for (entry, img) in record.images.iter().zip(images) {
            out.push((img.clone(), entry.annotation, label));
        }
    }
    Ok(out)
}

/// Trains the attribute classifier with softmax cross-entropy.
pub fn train_classifier(dataset: &Dataset, config: &ClassifierConfig) -> Result<(AttributeClassifier, Vec<f64>)> {
    let mut model = AttributeClassifier::new(config.clone())?;
    let items = labelled_items(dataset)?;
    if items.is_empty() {
        return Err(Error::Validation("no images to train the classifier on".into()));
    }
    let refs: Vec<(&Tensor, &EyeAnnotation)> = items.iter().map(|(i, a, _)| (i, a)).collect();
    let crops = model.crops(&refs)?;
    let labels: Vec<usize> = items.iter().map(|(_, _, l)| *l).collect();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc1a5_5e5);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = Tensor::stack(&batch.iter().map(|&i| crops.index_outer(i)).collect::<Vec<_>>().iter().collect::<Vec<_>>());
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let p = tape.bind(&model.params, true);
            let xv = tape.constant(x);
            let (_, logits) = model.forward(&mut tape, &p, xv);
            let loss = tape.softmax_cross_entropy(logits, &y);
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("classifier loss at epoch {epoch}"),
                });
            }
            total += v * batch.len() as f64;
            let grads = tape.backward(loss).collect(&tape, &p);
            adam.update(&mut model.params, &grads);
        }
        curve.push(total / items.len() as f64);
    }
    Ok((model, curve))
}

impl FeatureExtractor for AttributeClassifier {
    fn name(&self) -> String {
        format!("attribute-classifier-{}d", self.config.embedding_dim)
    }

    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn embed(&self, items: &[(&Tensor, &EyeAnnotation)]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(items)?.0)
    }
}

impl Classifier for AttributeClassifier {
    fn class_count(&self) -> usize {
        ATTRIBUTE_CLASSES
    }

    fn probabilities(&self, items: &[(&Tensor, &EyeAnnotation)]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(items)?.1)
    }
}

/// Uses the compressor's 256-d eye code as the embedding.
pub struct CodeExtractor<'a>(pub &'a Compressor);

impl FeatureExtractor for CodeExtractor<'_> {
    fn name(&self) -> String {
        "eye-code".into()
    }

    fn embedding_dim(&self) -> usize {
        self.0.code_dim()
    }

    fn embed(&self, items: &[(&Tensor, &EyeAnnotation)]) -> Result<Vec<Vec<f64>>> {
        Ok(self.0.codes_for_images(items)?.iter().map(|c| c.combined()).collect())
    }
}
