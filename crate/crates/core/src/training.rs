//! Adversarial training: loss assembly, alternating Adam updates, label
//! smoothing, checkpointing and best-FID selection.
//!
//! Each step first updates the discriminator on real targets and detached
//! composites, then updates the generator through the freshly updated
//! discriminator. The generator loss is
//! `w_content * L1 + w_adv * adv_G + w_perceptual * perceptual`, where the
//! L1 term and the discriminator's fake input are the composite (generated
//! pixels inside the mask, original pixels outside).

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Checkpoint};
use crate::compressor::{Compressor, EyeCode};
use crate::data::{assemble_sample, make_pair_epoch, Dataset, PairIndex, PairMode, TrainingSample};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{check_shape, Error, Result};
use crate::generator::{Generator, GeneratorConfig, GeneratorVariant};
use crate::masking::{composite, local_plan, LocalSpec, MaskSchedule, MaskSpec};
use crate::nn::{Adam, AdamConfig, ResamplePlan, Tape, Var};
use crate::tensor::Tensor;

const CHECKPOINT_KIND: &str = "exgan";
/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROBABILITY_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    NonExemplar,
    Reference,
    Code,
}

impl ModelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::NonExemplar => "non-exemplar",
            ModelFamily::Reference => "reference",
            ModelFamily::Code => "code",
        }
    }

    /// Table label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            ModelFamily::NonExemplar => "Non-exemplar",
            ModelFamily::Reference => "Reference",
            ModelFamily::Code => "Code",
        }
    }

    /// Forces the architecture switches that define the family onto the
    /// given configurations.
    pub fn apply(&self, generator: &mut GeneratorConfig, discriminator: &mut DiscriminatorConfig) {
        match self {
            ModelFamily::NonExemplar => {
                generator.variant = GeneratorVariant::DilatedConv;
                generator.input_channels = 4;
                discriminator.with_reference = false;
                discriminator.code_fusion = false;
            }
            ModelFamily::Reference => {
                generator.variant = GeneratorVariant::DilatedConv;
                generator.input_channels = 8;
                discriminator.with_reference = true;
                discriminator.code_fusion = false;
            }
            ModelFamily::Code => {
                generator.variant = GeneratorVariant::EncoderDecoder;
                generator.input_channels = 4;
                discriminator.with_reference = false;
                discriminator.code_fusion = true;
            }
        }
    }

    /// The family a pair of configurations belongs to, or a config error if
    /// they do not form one.
    pub fn of(generator: &GeneratorConfig, discriminator: &DiscriminatorConfig) -> Result<Self> {
        let family = match (generator.variant, generator.input_channels) {
            (GeneratorVariant::DilatedConv, 4) => ModelFamily::NonExemplar,
            (GeneratorVariant::DilatedConv, 8) => ModelFamily::Reference,
            (GeneratorVariant::EncoderDecoder, 4) => ModelFamily::Code,
            (v, c) => return Err(Error::Config(format!("no model family uses a {v:?} generator with {c} channels"))),
        };
        let expected = (family == ModelFamily::Reference, family == ModelFamily::Code);
        if (discriminator.with_reference, discriminator.code_fusion) != expected {
            return Err(Error::Config(format!(
                "{} generator needs a discriminator with reference branch = {}, code fusion = {}",
                family.name(),
                expected.0,
                expected.1
            )));
        }
        if family == ModelFamily::Code && generator.code_dim != discriminator.code_dim {
            return Err(Error::Config("generator and discriminator code widths differ".into()));
        }
        Ok(family)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub content: f64,
    pub adversarial: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            content: 1.0,
            adversarial: 0.01,
            perceptual: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.content, self.adversarial, self.perceptual];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || self.content <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative with a positive content weight: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn total(&self, content: f64, adversarial: f64, perceptual: f64) -> f64 {
        self.content * content + self.adversarial * adversarial + self.perceptual * perceptual
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLoss {
    /// `-log D(G(z))`.
    #[default]
    NonSaturating,
    /// `log(1 - D(G(z)))`, minimised.
    Minimax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothingMode {
    /// Each real target becomes `value` with probability `probability`.
    #[default]
    Stochastic,
    /// Every real target is `1 - probability`.
    Fixed,
}

/// One-sided label smoothing of the discriminator's real targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelSmoothing {
    pub mode: SmoothingMode,
    pub probability: f64,
    pub value: f64,
}

impl Default for LabelSmoothing {
    fn default() -> Self {
        Self {
            mode: SmoothingMode::Stochastic,
            probability: 0.05,
            value: 0.9,
        }
    }
}

impl LabelSmoothing {
    pub fn none() -> Self {
        Self {
            probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) || !(0.0..=1.0).contains(&self.value) {
            return Err(Error::Config(format!("label smoothing out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Real-sample targets for a batch. Fake targets are always 0 and are not
/// produced here.
pub fn smooth_labels<R: Rng>(batch_size: usize, policy: &LabelSmoothing, rng: &mut R) -> Vec<f64> {
    match policy.mode {
        SmoothingMode::Stochastic => (0..batch_size)
            .map(|_| {
                if rng.gen::<f64>() < policy.probability {
                    policy.value
                } else {
                    1.0
                }
            })
            .collect(),
        SmoothingMode::Fixed => vec![1.0 - policy.probability; batch_size],
    }
}

/// Binary cross-entropy of probability `p` against target `t`.
pub fn binary_cross_entropy(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROBABILITY_EPSILON, 1.0 - PROBABILITY_EPSILON);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// `(loss_D, loss_G)` for one real and one fake discriminator output.
pub fn adversarial_losses(d_real: f64, d_fake: f64, real_target: f64, form: GeneratorLoss) -> (f64, f64) {
    let loss_d = binary_cross_entropy(d_real, real_target) + binary_cross_entropy(d_fake, 0.0);
    let loss_g = match form {
        GeneratorLoss::NonSaturating => binary_cross_entropy(d_fake, 1.0),
        GeneratorLoss::Minimax => -binary_cross_entropy(d_fake, 0.0),
    };
    (loss_d, loss_g)
}

/// Mean absolute difference over all pixels and channels.
pub fn content_loss(generated: &Tensor, target: &Tensor) -> Result<f64> {
    check_shape(target.shape(), generated.shape())?;
    Ok(generated
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / generated.len() as f64)
}

/// Distance between the code of a generated image's eyes (located by the
/// input annotation) and the exemplar code.
pub fn perceptual_loss(
    generated: &Tensor,
    annotation: &crate::data::EyeAnnotation,
    code: &EyeCode,
    compressor: &Compressor,
) -> Result<f64> {
    let c = compressor.code_for_image(generated, annotation)?;
    Ok(crate::compressor::code_distance(&c, code))
}

/// Index of the lowest finite FID; ties keep the earliest.
pub fn select_best_fid(fids: &[f64]) -> Option<usize> {
    fids.iter()
        .enumerate()
        .filter(|(_, f)| f.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, &f)| match best {
            Some((_, b)) if b <= f => best,
            _ => Some((i, f)),
        })
        .map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier on the discriminator's learning rate.
    pub discriminator_weight: f64,
    pub weights: LossWeights,
    pub label_smoothing: LabelSmoothing,
    pub generator_loss: GeneratorLoss,
    pub pair_mode: PairMode,
    pub mask: MaskSchedule,
    /// Padding of the discriminator's local crop around both eyes, as a
    /// fraction of the eye union's height.
    pub local_padding_fraction: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            discriminator_weight: 1.0,
            weights: LossWeights::default(),
            label_smoothing: LabelSmoothing::default(),
            generator_loss: GeneratorLoss::default(),
            pair_mode: PairMode::default(),
            mask: MaskSchedule::default(),
            local_padding_fraction: 0.25,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.discriminator_weight >= 0.0) {
            return Err(Error::Config("learning rate must be positive and discriminator weight non-negative".into()));
        }
        self.weights.validate()?;
        self.label_smoothing.validate()?;
        self.mask.validate()
    }

    fn adam(&self, multiplier: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate * multiplier,
            ..AdamConfig::default()
        }
    }
}

/// Loss components and bookkeeping of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub images_seen: u64,
    pub content: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub perceptual: f64,
    pub total_g: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub real_targets: Vec<f64>,
    pub fake_targets: Vec<f64>,
    pub wall_time: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,content,adv_G,adv_D,perceptual,wall_time";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.step, self.content, self.adv_g, self.adv_d, self.perceptual, self.wall_time
        )
    }
}

pub fn loss_curve_csv(history: &[StepRecord]) -> String {
    let mut out = String::from(StepRecord::CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Images with their precomputed exemplar codes.
#[derive(Clone, Debug)]
pub struct TrainingSet<'a> {
    pub dataset: &'a Dataset,
    /// `codes[identity][image]`, present for the code family.
    pub codes: Option<Vec<Vec<EyeCode>>>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(dataset: &'a Dataset, compressor: Option<&Compressor>) -> Result<Self> {
        let codes = match compressor {
            None => None,
            Some(c) => {
                let mut codes = Vec::with_capacity(dataset.len());
                for (record, images) in dataset.records().iter().zip(dataset.images()) {
                    let items: Vec<_> = images.iter().zip(&record.images).map(|(img, e)| (img, &e.annotation)).collect();
                    codes.push(c.codes_for_images(&items)?);
                }
                Some(codes)
            }
        };
        Ok(Self { dataset, codes })
    }

    pub fn sample(&self, pair: PairIndex, mask: &MaskSpec) -> Result<TrainingSample> {
        let record = &self.dataset.records()[pair.identity];
        let mut s = assemble_sample(
            self.dataset.image(pair.identity, pair.target),
            self.dataset.image(pair.identity, pair.reference),
            &record.images[pair.target].annotation,
            &record.images[pair.reference].annotation,
            mask,
        )?;
        s.code = self.codes.as_ref().map(|c| c[pair.identity][pair.reference].clone());
        Ok(s)
    }

    /// Fixed evaluation pairs: every image is a target once, with the next
    /// image of the same identity as its reference.
    pub fn evaluation_pairs(&self) -> Vec<PairIndex> {
        let mut pairs = Vec::new();
        for (identity, record) in self.dataset.records().iter().enumerate() {
            let n = record.images.len();
            if n < 2 {
                continue;
            }
            for target in 0..n {
                pairs.push(PairIndex {
                    identity,
                    target,
                    reference: (target + 1) % n,
                });
            }
        }
        pairs
    }

    pub fn evaluation_samples(&self, mask: &MaskSpec) -> Result<Vec<TrainingSample>> {
        self.evaluation_pairs().into_iter().map(|p| self.sample(p, mask)).collect()
    }
}

/// Stacked tensors of a batch of samples.
struct Batch {
    n: usize,
    gen_input: Tensor,
    code: Option<Tensor>,
    targets: Tensor,
    masks: Tensor,
    references: Tensor,
    local_plans: Vec<ResamplePlan>,
    eye_plans: Option<(Vec<ResamplePlan>, Vec<ResamplePlan>)>,
}

fn stack_batch(
    samples: &[TrainingSample],
    family: ModelFamily,
    local: &LocalSpec,
    compressor: Option<&Compressor>,
) -> Result<Batch> {
    let n = samples.len();
    let (h, w) = samples[0].image_size();
    let mut inputs = Vec::with_capacity(n);
    let mut local_plans = Vec::with_capacity(n);
    for s in samples {
        check_shape(&[3, h, w], s.target.shape())?;
        let mut parts = vec![&s.masked_input, &s.mask];
        if family == ModelFamily::Reference {
            parts.push(&s.reference);
            parts.push(&s.reference_eye_mask);
        }
        inputs.push(Tensor::concat_axis0(&parts));
        let padding = local.padding_for(&s.target_annotation);
        local_plans.push(local_plan(&s.target_annotation, padding, h, w, (local.out_height, local.out_width))?.1);
    }
    let code = if family == ModelFamily::Code {
        let mut data = Vec::new();
        for s in samples {
            let c = s
                .code
                .as_ref()
                .ok_or_else(|| Error::Validation("code model needs samples with eye codes".into()))?;
            data.extend(c.combined());
        }
        let dim = data.len() / n;
        Some(Tensor::from_vec(&[n, dim], data))
    } else {
        None
    };
    let eye_plans = match compressor {
        Some(c) => {
            let mut l = Vec::with_capacity(n);
            let mut r = Vec::with_capacity(n);
            for s in samples {
                let (lp, rp) = c.eye_plans(&s.target_annotation, h, w)?;
                l.push(lp);
                r.push(rp);
            }
            Some((l, r))
        }
        None => None,
    };
    let refs = |f: fn(&TrainingSample) -> &Tensor| Tensor::stack(&samples.iter().map(f).collect::<Vec<_>>());
    Ok(Batch {
        n,
        gen_input: Tensor::stack(&inputs.iter().collect::<Vec<_>>()),
        code,
        targets: refs(|s| &s.target),
        masks: refs(|s| &s.mask),
        references: refs(|s| &s.reference),
        local_plans,
        eye_plans,
    })
}

/// Composited in-painting of a batch of samples with frozen weights.
pub fn inpaint_batch(generator: &Generator, samples: &[TrainingSample]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let family = if generator.config().uses_code() {
            ModelFamily::Code
        } else if generator.config().uses_reference() {
            ModelFamily::Reference
        } else {
            ModelFamily::NonExemplar
        };
        let b = stack_batch(chunk, family, &LocalSpec::default_for(chunk), None)?;
        let mut tape = Tape::new();
        let p = tape.bind(generator.params(), false);
        let x = tape.constant(b.gen_input);
        let code = b.code.map(|c| tape.constant(c));
        let y = generator.forward_on_tape(&mut tape, &p, x, code);
        let comp = tape.composite(y, &b.targets, &b.masks);
        let v = tape.value(comp);
        if !v.all_finite() {
            return Err(Error::NonFinite {
                context: "generator output during in-painting".into(),
            });
        }
        for i in 0..b.n {
            out.push(v.index_outer(i));
        }
    }
    Ok(out)
}

/// Composited in-painting of one sample.
pub fn inpaint_sample(generator: &Generator, sample: &TrainingSample) -> Result<Tensor> {
    let out = inpaint_batch(generator, std::slice::from_ref(sample))?.remove(0);
    // Pixels outside the mask come straight from the input.
    composite(&out, &sample.target, &sample.mask)
}

impl LocalSpec {
    fn default_for(samples: &[TrainingSample]) -> Self {
        let (h, _) = samples[0].image_size();
        LocalSpec::for_image_size(h)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub generator_opt: Adam,
    pub discriminator_opt: Adam,
    pub epoch: u64,
    pub epoch_cursor: usize,
    pub images_seen: u64,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepRecord>,
}

pub struct Trainer {
    pub config: TrainingConfig,
    pub family: ModelFamily,
    pub state: TrainState,
    pub compressor: Option<Compressor>,
    /// Identities the model was trained on, stored for leak checks.
    pub train_identities: BTreeSet<String>,
    local: LocalSpec,
    epoch_pairs: Option<(u64, Vec<PairIndex>)>,
    clock: Instant,
    clock_offset: f64,
    /// When false, step records carry a wall time of 0 so that checkpoints
    /// are byte-identical across runs.
    pub record_wall_time: bool,
}

/// Hooks the training loop calls between steps.
pub struct RunOptions<'f> {
    /// Stop once this many image pairs have been consumed.
    pub budget_images: u64,
    /// Validate every this many image pairs (0 disables).
    pub validate_every: u64,
    pub validate: Option<&'f mut dyn FnMut(&Trainer) -> Result<f64>>,
    /// Checkpoint every this many image pairs (0 disables).
    pub checkpoint_every: u64,
    pub on_checkpoint: Option<&'f mut dyn FnMut(&Trainer) -> Result<()>>,
}

impl<'f> RunOptions<'f> {
    pub fn budget(budget_images: u64) -> Self {
        Self {
            budget_images,
            validate_every: 0,
            validate: None,
            checkpoint_every: 0,
            on_checkpoint: None,
        }
    }
}

/// Validation FIDs collected during a run and the best-scoring snapshot.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub validation: Vec<(u64, f64)>,
    pub best: Option<usize>,
    pub best_checkpoint: Option<Checkpoint>,
}

impl Trainer {
    pub fn new(
        config: TrainingConfig,
        generator: GeneratorConfig,
        discriminator: DiscriminatorConfig,
        compressor: Option<Compressor>,
    ) -> Result<Self> {
        config.validate()?;
        let family = ModelFamily::of(&generator, &discriminator)?;
        match (family, &compressor) {
            (ModelFamily::Code, None) => {
                return Err(Error::Config("the code family needs a trained compressor".into()));
            }
            (ModelFamily::Code, Some(c)) if c.code_dim() != generator.code_dim => {
                return Err(Error::Config(format!(
                    "compressor codes are {}-d but the generator expects {}",
                    c.code_dim(),
                    generator.code_dim
                )));
            }
            _ => {}
        }
        let generator = Generator::new(generator)?;
        let discriminator = Discriminator::new(discriminator)?;
        let local = LocalSpec {
            padding_fraction: config.local_padding_fraction,
            out_height: discriminator.config().local_height,
            out_width: discriminator.config().local_width,
        };
        let state = TrainState {
            generator_opt: Adam::new(config.adam(1.0), generator.params()),
            discriminator_opt: Adam::new(config.adam(config.discriminator_weight), discriminator.params()),
            generator,
            discriminator,
            epoch: 0,
            epoch_cursor: 0,
            images_seen: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            history: Vec::new(),
        };
        Ok(Self {
            compressor: if family == ModelFamily::Code { compressor } else { None },
            config,
            family,
            state,
            train_identities: BTreeSet::new(),
            local,
            epoch_pairs: None,
            clock: Instant::now(),
            clock_offset: 0.0,
            record_wall_time: true,
        })
    }

    pub fn local_spec(&self) -> &LocalSpec {
        &self.local
    }

    pub fn training_set<'a>(&self, dataset: &'a Dataset) -> Result<TrainingSet<'a>> {
        TrainingSet::new(dataset, self.compressor.as_ref())
    }

    fn pair_seed(&self, epoch: u64) -> u64 {
        self.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch.wrapping_add(1).wrapping_mul(0xd1b5_4a32_d192_ed03)
    }

    fn epoch_pairs(&mut self, set: &TrainingSet) -> Vec<PairIndex> {
        let epoch = self.state.epoch;
        if !matches!(&self.epoch_pairs, Some((e, _)) if *e == epoch) {
            let pairs = make_pair_epoch(set.dataset.records(), self.pair_seed(epoch), self.config.pair_mode).pairs;
            self.epoch_pairs = Some((epoch, pairs));
        }
        self.epoch_pairs.as_ref().map(|(_, p)| p.clone()).unwrap_or_default()
    }

    /// Number of pairs in one epoch over `set`.
    pub fn epoch_len(&mut self, set: &TrainingSet) -> usize {
        self.epoch_pairs(set).len()
    }

    /// Pairs of the next batch, at most `limit` of them, never crossing an
    /// epoch boundary. Advances the epoch cursor.
    pub fn next_pairs(&mut self, set: &TrainingSet, limit: usize) -> Result<Vec<PairIndex>> {
        let pairs = self.epoch_pairs(set);
        if pairs.is_empty() {
            return Err(Error::Validation("no identity has two images to pair".into()));
        }
        let start = self.state.epoch_cursor;
        let end = (start + self.config.batch_size.min(limit)).min(pairs.len());
        let batch = pairs[start..end].to_vec();
        self.state.epoch_cursor = end;
        if end == pairs.len() {
            self.state.epoch += 1;
            self.state.epoch_cursor = 0;
        }
        Ok(batch)
    }

    pub fn assemble(&mut self, set: &TrainingSet, pairs: &[PairIndex]) -> Result<Vec<TrainingSample>> {
        pairs
            .iter()
            .map(|&p| {
                let spec = self.config.mask.sample(&mut self.state.rng);
                set.sample(p, &spec)
            })
            .collect()
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, samples: &[TrainingSample]) -> Result<StepRecord> {
        if samples.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let perceptual_on = self.compressor.is_some();
        let b = stack_batch(samples, self.family, &self.local, self.compressor.as_ref())?;
        let real_targets = smooth_labels(b.n, &self.config.label_smoothing, &mut self.state.rng);
        let fake_targets = vec![0.0; b.n];

        let mut tape = Tape::new();
        let gp = tape.bind(self.state.generator.params(), true);
        let x = tape.constant(b.gen_input.clone());
        let code = b.code.as_ref().map(|c| tape.constant(c.clone()));
        let raw = self.state.generator.forward_on_tape(&mut tape, &gp, x, code);
        let comp = tape.composite(raw, &b.targets, &b.masks);

        // Discriminator update on real targets and detached composites.
        let dp = tape.bind(self.state.discriminator.params(), true);
        let real = tape.constant(b.targets.clone());
        let real_local = tape.resample(real, b.local_plans.clone());
        let reference = (self.family == ModelFamily::Reference).then(|| tape.constant(b.references.clone()));
        let real_logits = self
            .state
            .discriminator
            .forward_on_tape(&mut tape, &dp, real, real_local, reference, code);
        let fake = tape.constant(tape.value(comp).clone());
        let fake_local = tape.resample(fake, b.local_plans.clone());
        let fake_logits = self
            .state
            .discriminator
            .forward_on_tape(&mut tape, &dp, fake, fake_local, reference, code);
        let d_real_loss = tape.bce_with_logits(real_logits, &real_targets);
        let d_fake_loss = tape.bce_with_logits(fake_logits, &fake_targets);
        let d_loss = tape.add(d_real_loss, d_fake_loss);
        let adv_d = tape.value(d_loss).item();
        let mean_prob = |t: &Tape, v: Var| {
            let l = t.value(v);
            l.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).sum::<f64>() / l.len() as f64
        };
        let d_real = mean_prob(&tape, real_logits);
        let d_fake = mean_prob(&tape, fake_logits);
        if !adv_d.is_finite() {
            return Err(Error::NonFinite {
                context: format!("discriminator loss at step {}", self.state.step),
            });
        }
        let d_grads = tape.backward(d_loss).collect(&tape, &dp);

        let mut next_disc = self.state.discriminator.clone();
        let mut next_dopt = self.state.discriminator_opt.clone();
        next_dopt.update(next_disc.params_mut(), &d_grads);

        // Generator update through the updated discriminator.
        let dp2 = tape.bind(next_disc.params(), false);
        let comp_local = tape.resample(comp, b.local_plans.clone());
        let g_logits = next_disc.forward_on_tape(&mut tape, &dp2, comp, comp_local, reference, code);
        let adv_g_var = match self.config.generator_loss {
            GeneratorLoss::NonSaturating => tape.bce_with_logits(g_logits, &vec![1.0; b.n]),
            GeneratorLoss::Minimax => {
                let l = tape.bce_with_logits(g_logits, &fake_targets);
                tape.scale(l, -1.0)
            }
        };
        let content_var = tape.mean_abs_diff(comp, &b.targets);
        let w = self.config.weights;
        let mut total = tape.scale(content_var, w.content);
        let weighted_adv = tape.scale(adv_g_var, w.adversarial);
        total = tape.add(total, weighted_adv);
        let mut perceptual = 0.0;
        if let (true, Some(c), Some((lp, rp)), Some(code_t)) =
            (perceptual_on, self.compressor.as_ref(), b.eye_plans.as_ref(), b.code.as_ref())
        {
            let perc = perceptual_on_tape(&mut tape, c, comp, lp, rp, code_t);
            perceptual = tape.value(perc).item();
            if w.perceptual > 0.0 {
                let weighted = tape.scale(perc, w.perceptual);
                total = tape.add(total, weighted);
            }
        }
        let content = tape.value(content_var).item();
        let adv_g = tape.value(adv_g_var).item();
        let total_g = tape.value(total).item();
        if ![content, adv_g, perceptual, total_g].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("generator loss at step {}", self.state.step),
            });
        }
        let g_grads = tape.backward(total).collect(&tape, &gp);
        self.state.generator_opt.update(self.state.generator.params_mut(), &g_grads);
        self.state.discriminator = next_disc;
        self.state.discriminator_opt = next_dopt;
        if !self.state.generator.params().all_finite() || !self.state.discriminator.params().all_finite() {
            return Err(Error::NonFinite {
                context: format!("parameters after step {}", self.state.step),
            });
        }

        self.state.step += 1;
        self.state.images_seen += b.n as u64;
        let record = StepRecord {
            step: self.state.step,
            epoch: self.state.epoch,
            images_seen: self.state.images_seen,
            content,
            adv_g,
            adv_d,
            perceptual,
            total_g,
            d_real,
            d_fake,
            real_targets,
            fake_targets,
            wall_time: if self.record_wall_time {
                self.clock_offset + self.clock.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.state.history.push(record.clone());
        Ok(record)
    }

    /// Trains until `options.budget_images` pairs have been consumed.
    pub fn run(&mut self, set: &TrainingSet, mut options: RunOptions) -> Result<RunSummary> {
        if options.budget_images == 0 {
            return Err(Error::Config("training budget must be positive".into()));
        }
        self.train_identities.extend(set.dataset.identity_ids());
        let mut summary = RunSummary::default();
        let mut fids = Vec::new();
        while self.state.images_seen < options.budget_images {
            let remaining = (options.budget_images - self.state.images_seen) as usize;
            let pairs = self.next_pairs(set, remaining)?;
            let samples = self.assemble(set, &pairs)?;
            let before = self.state.images_seen;
            self.train_step(&samples).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context}; batch pairs {pairs:?}"),
                },
                other => other,
            })?;
            let now = self.state.images_seen;
            let crossed = |every: u64| every > 0 && (now / every > before / every || now == options.budget_images);
            if crossed(options.checkpoint_every) {
                if let Some(f) = options.on_checkpoint.as_deref_mut() {
                    f(self)?;
                }
            }
            if crossed(options.validate_every) {
                if let Some(f) = options.validate.as_deref_mut() {
                    let fid = f(self)?;
                    summary.validation.push((now, fid));
                    fids.push(fid);
                    let best = select_best_fid(&fids);
                    if best == Some(fids.len() - 1) {
                        summary.best_checkpoint = Some(self.to_checkpoint()?);
                    }
                    summary.best = best;
                }
            }
        }
        Ok(summary)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let s = &self.state;
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set("family", &self.family)?;
        ck.set("training_config", &self.config)?;
        ck.set("config_hash", &config_hash(&(&self.config, s.generator.config(), s.discriminator.config())))?;
        ck.set("epoch", &s.epoch)?;
        ck.set("epoch_cursor", &s.epoch_cursor)?;
        ck.set("images_seen", &s.images_seen)?;
        ck.set("step", &s.step)?;
        ck.set("rng", &s.rng)?;
        ck.set("history", &s.history)?;
        ck.set("train_identities", &self.train_identities)?;
        ck.set("generator_adam", &(s.generator_opt.config, s.generator_opt.step))?;
        ck.set("discriminator_adam", &(s.discriminator_opt.config, s.discriminator_opt.step))?;
        s.generator.write_checkpoint(&mut ck, "generator")?;
        s.discriminator.write_checkpoint(&mut ck, "discriminator")?;
        ck.push_tensors("generator_adam/m", &s.generator_opt.first_moment);
        ck.push_tensors("generator_adam/v", &s.generator_opt.second_moment);
        ck.push_tensors("discriminator_adam/m", &s.discriminator_opt.first_moment);
        ck.push_tensors("discriminator_adam/v", &s.discriminator_opt.second_moment);
        if let Some(c) = &self.compressor {
            c.embed(&mut ck)?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let generator = Generator::read_checkpoint(ck, "generator")?;
        let discriminator = Discriminator::read_checkpoint(ck, "discriminator")?;
        let compressor = if ck.has("compressor_config") {
            Some(Compressor::from_embedded(ck)?)
        } else {
            None
        };
        let config: TrainingConfig = ck.get("training_config")?;
        let mut t = Trainer::new(config, generator.config().clone(), discriminator.config().clone(), compressor)?;
        let restore_adam = |prefix: &str, key: &str, n: usize| -> Result<Adam> {
            let (config, step): (AdamConfig, u64) = ck.get(key)?;
            let first_moment = ck.tensors_with_prefix(&format!("{prefix}/m"));
            let second_moment = ck.tensors_with_prefix(&format!("{prefix}/v"));
            if first_moment.len() != n || second_moment.len() != n {
                return Err(Error::Checkpoint(format!("{prefix} moments do not match the model")));
            }
            Ok(Adam {
                config,
                step,
                first_moment,
                second_moment,
            })
        };
        t.state.generator_opt = restore_adam("generator_adam", "generator_adam", generator.params().len())?;
        t.state.discriminator_opt =
            restore_adam("discriminator_adam", "discriminator_adam", discriminator.params().len())?;
        t.state.generator = generator;
        t.state.discriminator = discriminator;
        t.state.epoch = ck.get("epoch")?;
        t.state.epoch_cursor = ck.get("epoch_cursor")?;
        t.state.images_seen = ck.get("images_seen")?;
        t.state.step = ck.get("step")?;
        t.state.rng = ck.get("rng")?;
        t.state.history = ck.get("history")?;
        t.train_identities = ck.get("train_identities")?;
        t.clock_offset = t.state.history.last().map_or(0.0, |r| r.wall_time);
        Ok(t)
    }
}

/// Mean over the batch of `|| C(eyes of comp) - code ||_2`, differentiable
/// in `comp` through the frozen encoder.
fn perceptual_on_tape(
    tape: &mut Tape,
    compressor: &Compressor,
    comp: Var,
    left_plans: &[ResamplePlan],
    right_plans: &[ResamplePlan],
    code: &Tensor,
) -> Var {
    let cp = tape.bind(compressor.params(), false);
    let l = tape.resample(comp, left_plans.to_vec());
    let r = tape.resample(comp, right_plans.to_vec());
    let lc = compressor.encode_on_tape(tape, &cp, l);
    let rc = compressor.encode_on_tape(tape, &cp, r);
    let c = tape.concat(&[lc, rc]);
    tape.row_l2_distance(c, code)
}

/// Perceptual loss of a batch of generated images on a fresh tape, with the
/// gradient with respect to those images. Used by gradient checks.
pub fn perceptual_loss_and_gradient(
    compressor: &Compressor,
    generated: &Tensor,
    annotations: &[crate::data::EyeAnnotation],
    code: &Tensor,
) -> Result<(f64, Tensor)> {
    let (n, _, h, w) = generated.dims4();
    let mut lp = Vec::with_capacity(n);
    let mut rp = Vec::with_capacity(n);
    for a in annotations {
        let (l, r) = compressor.eye_plans(a, h, w)?;
        lp.push(l);
        rp.push(r);
    }
    let mut tape = Tape::new();
    let g = tape.leaf(generated.clone(), true);
    let loss = perceptual_on_tape(&mut tape, compressor, g, &lp, &rp, code);
    let value = tape.value(loss).item();
    let grad = tape
        .backward(loss)
        .get(g)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(generated.shape()));
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::CompressorConfig;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};

    #[test]
    fn bce_analytic_cases() {
        let (d, g) = adversarial_losses(0.5, 0.5, 1.0, GeneratorLoss::NonSaturating);
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g - 2f64.ln()).abs() < 1e-12);
        let expected = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((binary_cross_entropy(0.9, 0.9) - expected).abs() < 1e-12);
        assert!((expected - 0.3251).abs() < 1e-4);
        assert!(binary_cross_entropy(0.0, 1.0).is_finite());
        assert!(binary_cross_entropy(1.0, 0.0).is_finite());
        let (_, minimax) = adversarial_losses(0.5, 0.5, 1.0, GeneratorLoss::Minimax);
        assert!((minimax - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn content_loss_cases() {
        let z = Tensor::zeros(&[3, 4, 4]);
        let o = Tensor::full(&[3, 4, 4], 1.0);
        assert_eq!(content_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(content_loss(&z, &o).unwrap(), 1.0);
        assert!(content_loss(&z, &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn smoothing_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p0 = LabelSmoothing::none();
        assert!(smooth_labels(100, &p0, &mut rng).iter().all(|&t| t == 1.0));
        let p1 = LabelSmoothing {
            probability: 1.0,
            ..Default::default()
        };
        assert!(smooth_labels(100, &p1, &mut rng).iter().all(|&t| t == 0.9));
        let targets = smooth_labels(10_000, &LabelSmoothing::default(), &mut rng);
        let smoothed = targets.iter().filter(|&&t| t == 0.9).count() as f64;
        let sigma = (10_000.0 * 0.05 * 0.95f64).sqrt();
        assert!((smoothed - 500.0).abs() <= 3.0 * sigma, "{smoothed}");
        let fixed = LabelSmoothing {
            mode: SmoothingMode::Fixed,
            ..Default::default()
        };
        assert!(smooth_labels(5, &fixed, &mut rng).iter().all(|&t| t == 0.95));
    }

    #[test]
    fn best_fid_selection() {
        assert_eq!(select_best_fid(&[9.0, 7.67, 10.55]), Some(1));
        assert_eq!(select_best_fid(&[]), None);
        assert_eq!(select_best_fid(&[f64::NAN, 3.0, 3.0]), Some(1));
    }

    #[test]
    fn family_rules() {
        let mut g = GeneratorConfig::default();
        let mut d = DiscriminatorConfig::default();
        for f in [ModelFamily::NonExemplar, ModelFamily::Reference, ModelFamily::Code] {
            f.apply(&mut g, &mut d);
            assert_eq!(ModelFamily::of(&g, &d).unwrap(), f);
        }
        d.code_fusion = false;
        assert!(ModelFamily::of(&g, &d).is_err());
        let code_without_compressor = Trainer::new(
            TrainingConfig::default(),
            GeneratorConfig::encoder_decoder(),
            DiscriminatorConfig {
                code_fusion: true,
                ..Default::default()
            },
            None,
        );
        assert!(matches!(code_without_compressor, Err(Error::Config(_))));
    }

    pub(crate) fn tiny_setup(family: ModelFamily, seed: u64) -> (Dataset, Trainer) {
        let data = generate_synthetic_dataset(&SyntheticConfig::new(4, 3, 32, 5)).unwrap().into_dataset();
        let mut g = GeneratorConfig {
            base_channels: 2,
            image_size: 32,
            dilations: vec![2],
            seed,
            ..Default::default()
        };
        let mut d = DiscriminatorConfig {
            base_channels: 2,
            image_size: 32,
            local_height: 16,
            local_width: 32,
            fusion_hidden: vec![8],
            seed: seed + 1,
            ..Default::default()
        };
        family.apply(&mut g, &mut d);
        let compressor = (family == ModelFamily::Code).then(|| {
            Compressor::new(CompressorConfig {
                base_channels: 2,
                ..Default::default()
            })
            .unwrap()
        });
        let cfg = TrainingConfig {
            batch_size: 3,
            seed,
            ..Default::default()
        };
        (data, Trainer::new(cfg, g, d, compressor).unwrap())
    }

    #[test]
    fn fake_targets_are_zero_and_total_recomputes() {
        for family in [ModelFamily::NonExemplar, ModelFamily::Reference, ModelFamily::Code] {
            let (data, mut t) = tiny_setup(family, 1);
            let set = t.training_set(&data).unwrap();
            t.run(&set, RunOptions::budget(8)).unwrap();
            assert_eq!(t.state.images_seen, 8);
            for r in &t.state.history {
                assert!(r.fake_targets.iter().all(|&v| v == 0.0));
                let w = t.config.weights;
                let perceptual = if family == ModelFamily::Code { r.perceptual } else { 0.0 };
                assert!((w.total(r.content, r.adv_g, perceptual) - r.total_g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn budget_of_one_epoch_consumes_exactly_its_pairs() {
        let (data, mut t) = tiny_setup(ModelFamily::NonExemplar, 2);
        let set = t.training_set(&data).unwrap();
        let n = t.epoch_len(&set) as u64;
        t.run(&set, RunOptions::budget(n)).unwrap();
        assert_eq!(t.state.images_seen, n);
        assert_eq!(t.state.epoch, 1);
        assert_eq!(t.state.epoch_cursor, 0);
    }

    #[test]
    fn identical_seeds_give_identical_steps() {
        let run = || {
            let (data, mut t) = tiny_setup(ModelFamily::Reference, 3);
            let set = t.training_set(&data).unwrap();
            t.run(&set, RunOptions::budget(6)).unwrap();
            let losses: Vec<_> = t.state.history.iter().map(|r| (r.content, r.adv_d, r.adv_g)).collect();
            (t.state.generator.params().clone(), t.state.discriminator.params().clone(), losses)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, mut straight) = tiny_setup(ModelFamily::Code, 4);
        let set = straight.training_set(&data).unwrap();
        straight.run(&set, RunOptions::budget(9)).unwrap();

        // Interrupt on a batch boundary of the uninterrupted run (end of the
        // first epoch: batches of 3 + 1).
        let (_, mut first) = tiny_setup(ModelFamily::Code, 4);
        first.run(&set, RunOptions::budget(4)).unwrap();
        assert_eq!(first.state.step, 2);
        let bytes = first.to_checkpoint().unwrap().encode();
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.encode(), bytes);
        let mut resumed = Trainer::from_checkpoint(&ck).unwrap();
        resumed.run(&set, RunOptions::budget(9)).unwrap();

        assert!(resumed.state.generator.params() == straight.state.generator.params());
        assert!(resumed.state.discriminator.params() == straight.state.discriminator.params());
        assert_eq!(resumed.state.generator_opt, straight.state.generator_opt);
        let strip = |h: &[StepRecord]| h.iter().map(|r| (r.step, r.content, r.adv_g, r.adv_d, r.perceptual)).collect::<Vec<_>>();
        assert_eq!(strip(&resumed.state.history), strip(&straight.state.history));
    }

    #[test]
    fn pure_l1_step_matches_l1_only_gradient() {
        let (data, mut t) = tiny_setup(ModelFamily::NonExemplar, 5);
        t.config.weights = LossWeights {
            content: 1.0,
            adversarial: 0.0,
            perceptual: 0.0,
        };
        let set = t.training_set(&data).unwrap();
        let pairs = t.next_pairs(&set, 3).unwrap();
        let samples = t.assemble(&set, &pairs).unwrap();
        let before = t.state.generator.clone();
        let mut reference_opt = t.state.generator_opt.clone();
        t.train_step(&samples).unwrap();

        let b = stack_batch(&samples, ModelFamily::NonExemplar, &t.local, None).unwrap();
        let mut tape = Tape::new();
        let p = tape.bind(before.params(), true);
        let x = tape.constant(b.gen_input);
        let y = before.forward_on_tape(&mut tape, &p, x, None);
        let comp = tape.composite(y, &b.targets, &b.masks);
        let l1 = tape.mean_abs_diff(comp, &b.targets);
        let grads = tape.backward(l1).collect(&tape, &p);
        let mut expected = before.params().clone();
        reference_opt.update(&mut expected, &grads);
        assert_eq!(t.state.generator.params(), &expected);
    }
}
