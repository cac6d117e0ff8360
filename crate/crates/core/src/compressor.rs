//! The eye autoencoder that turns eye crops into perceptual codes.
//!
//! A single encoder maps one eye crop to a 128-d vector. During training the
//! decoder splits into a left and a right branch, each reconstructing its own
//! eye from that one vector, so the code has to carry traits shared by both
//! eyes as well as what distinguishes them. A face's code is the
//! concatenation of the encodings of its left and right eye (256-d).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Checkpoint};
use crate::data::{Dataset, EyeAnnotation};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::nn::{Adam, AdamConfig, Conv, ConvGeom, Dense, ParamBuilder, ParamSet, ResamplePlan, Tape, Var, Window};
use crate::tensor::Tensor;

pub const EYE_CODE_HALF_DIM: usize = 128;
pub const EYE_CODE_DIM: usize = 2 * EYE_CODE_HALF_DIM;
const CHECKPOINT_KIND: &str = "compressor";

/// Perceptual code of a pair of eyes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeCode {
    left: Vec<f64>,
    right: Vec<f64>,
}

impl EyeCode {
    pub fn new(left: Vec<f64>, right: Vec<f64>) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::Validation(format!(
                "code halves differ in length: {} vs {}",
                left.len(),
                right.len()
            )));
        }
        if !left.iter().chain(&right).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "eye code".into(),
            });
        }
        Ok(Self { left, right })
    }

    pub fn left(&self) -> &[f64] {
        &self.left
    }

    pub fn right(&self) -> &[f64] {
        &self.right
    }

    /// `concat(left, right)`.
    pub fn combined(&self) -> Vec<f64> {
        let mut v = self.left.clone();
        v.extend_from_slice(&self.right);
        v
    }

    pub fn dim(&self) -> usize {
        self.left.len() + self.right.len()
    }
}

/// Euclidean distance between combined codes.
pub fn code_distance(a: &EyeCode, b: &EyeCode) -> f64 {
    a.left
        .iter()
        .chain(&a.right)
        .zip(b.left.iter().chain(&b.right))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressorConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    /// Padding around an eye box, as a fraction of its width/height.
    pub crop_padding_fraction: f64,
    pub base_channels: usize,
    pub code_dim: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            crop_height: 16,
            crop_width: 24,
            crop_padding_fraction: 0.25,
            base_channels: 16,
            code_dim: EYE_CODE_HALF_DIM,
            seed: 0,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
        }
    }
}

impl CompressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_height % 4 != 0 || self.crop_width % 4 != 0 || self.crop_height == 0 || self.crop_width == 0 {
            return Err(Error::Config(format!(
                "eye crop {}x{} must be a positive multiple of 4 in both dimensions",
                self.crop_height, self.crop_width
            )));
        }
        if self.base_channels == 0 || self.code_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("compressor sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Eye {
    Left,
    Right,
}

#[derive(Clone, Debug)]
struct DecoderLayers {
    expand: Dense,
    up1: Conv,
    up2: Conv,
}

#[derive(Clone, Debug)]
struct Layers {
    enc1: Conv,
    enc2: Conv,
    enc_out: Dense,
    left: DecoderLayers,
    right: DecoderLayers,
}

/// Trained (or freshly initialised) compressing function.
#[derive(Clone, Debug)]
pub struct Compressor {
    config: CompressorConfig,
    params: ParamSet,
    layers: Layers,
}

/// Per-epoch mean reconstruction losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressorCurve {
    pub total: Vec<f64>,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

/// Single-eye input with both eyes of the same face as targets.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeCropSample {
    pub left: Tensor,
    pub right: Tensor,
}

impl Compressor {
    pub fn new(config: CompressorConfig) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let (qh, qw) = (config.crop_height / 4, config.crop_width / 4);
        let mut pb = ParamBuilder::new(config.seed);
        let enc1 = pb.conv("encoder.conv1", 3, b, ConvGeom::same(3, 2, 1));
        let enc2 = pb.conv("encoder.conv2", b, 2 * b, ConvGeom::same(3, 2, 1));
        let enc_out = pb.dense("encoder.code", 2 * b * qh * qw, config.code_dim);
        let mut decoder = |name: &str| DecoderLayers {
            expand: pb.dense(&format!("{name}.expand"), config.code_dim, 2 * b * qh * qw),
            up1: pb.conv(&format!("{name}.up1"), 2 * b, b, ConvGeom::same(3, 1, 1)),
            up2: pb.conv(&format!("{name}.up2"), b, 3, ConvGeom::same(3, 1, 1)),
        };
        let left = decoder("decoder_left");
        let right = decoder("decoder_right");
        Ok(Self {
            params: pb.finish(),
            layers: Layers {
                enc1,
                enc2,
                enc_out,
                left,
                right,
            },
            config,
        })
    }

    pub fn config(&self) -> &CompressorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn code_half_dim(&self) -> usize {
        self.config.code_dim
    }

    pub fn code_dim(&self) -> usize {
        2 * self.config.code_dim
    }

    pub fn crop_size(&self) -> (usize, usize) {
        (self.config.crop_height, self.config.crop_width)
    }

    /// Parameter indices read by the encoder; shared by both code halves.
    pub fn encoder_param_indices(&self) -> Vec<usize> {
        let l = &self.layers;
        vec![
            l.enc1.weight,
            l.enc1.bias,
            l.enc2.weight,
            l.enc2.bias,
            l.enc_out.weight,
            l.enc_out.bias,
        ]
    }

    /// `[N, 3, crop_h, crop_w]` crops to `[N, code_dim]` codes.
    pub fn encode_on_tape(&self, tape: &mut Tape, p: &[Var], crops: Var) -> Var {
        let l = &self.layers;
        let h = l.enc1.forward(tape, p, crops);
        let h = tape.elu(h);
        let h = l.enc2.forward(tape, p, h);
        let h = tape.elu(h);
        let h = tape.flatten(h);
        l.enc_out.forward(tape, p, h)
    }

    pub fn decode_on_tape(&self, tape: &mut Tape, p: &[Var], code: Var, eye: Eye) -> Var {
        let d = match eye {
            Eye::Left => &self.layers.left,
            Eye::Right => &self.layers.right,
        };
        let n = tape.value(code).shape()[0];
        let b = self.config.base_channels;
        let h = d.expand.forward(tape, p, code);
        let h = tape.elu(h);
        let h = tape.reshape(h, &[n, 2 * b, self.config.crop_height / 4, self.config.crop_width / 4]);
        let h = tape.upsample2(h);
        let h = d.up1.forward(tape, p, h);
        let h = tape.elu(h);
        let h = tape.upsample2(h);
        let h = d.up2.forward(tape, p, h);
        tape.sigmoid(h)
    }

    /// Summed L1 reconstruction loss of both branches for a batch; returns
    /// `(total, left, right)` tape nodes.
    pub fn reconstruction_loss(
        &self,
        tape: &mut Tape,
        p: &[Var],
        inputs: &Tensor,
        left_targets: &Tensor,
        right_targets: &Tensor,
    ) -> (Var, Var, Var) {
        let x = tape.constant(inputs.clone());
        let code = self.encode_on_tape(tape, p, x);
        let left = self.decode_on_tape(tape, p, code, Eye::Left);
        let right = self.decode_on_tape(tape, p, code, Eye::Right);
        let l = tape.mean_abs_diff(left, left_targets);
        let r = tape.mean_abs_diff(right, right_targets);
        (tape.add(l, r), l, r)
    }

    fn check_crop(&self, crop: &Tensor) -> Result<()> {
        let expected = [3, self.config.crop_height, self.config.crop_width];
        if crop.shape() != expected {
            return Err(Error::Shape {
                expected: expected.to_vec(),
                actual: crop.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Encodes a batch of crops with frozen parameters.
    pub fn encode_batch(&self, crops: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        for c in crops {
            self.check_crop(c)?;
        }
        let mut tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let x = tape.constant(Tensor::stack(crops));
        let code = self.encode_on_tape(&mut tape, &p, x);
        let v = tape.value(code);
        let dim = self.config.code_dim;
        let out: Vec<Vec<f64>> = (0..crops.len()).map(|i| v.data()[i * dim..(i + 1) * dim].to_vec()).collect();
        if !v.all_finite() {
            return Err(Error::NonFinite {
                context: "compressor encoding".into(),
            });
        }
        Ok(out)
    }

    /// Encodes one `[3, crop_h, crop_w]` eye crop.
    pub fn encode_eye(&self, crop: &Tensor) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[crop])?.remove(0))
    }

    pub fn build_code(&self, left_crop: &Tensor, right_crop: &Tensor) -> Result<EyeCode> {
        let mut codes = self.encode_batch(&[left_crop, right_crop])?;
        let right = codes.pop().expect("two codes");
        let left = codes.pop().expect("two codes");
        EyeCode::new(left, right)
    }

    /// Code of the eyes of a face image, located by `annotation`.
    pub fn code_for_image(&self, image: &Tensor, annotation: &EyeAnnotation) -> Result<EyeCode> {
        let (l, r) = self.eye_crops(image, annotation)?;
        self.build_code(&l, &r)
    }

    /// Codes for many faces at once.
    pub fn codes_for_images(&self, items: &[(&Tensor, &EyeAnnotation)]) -> Result<Vec<EyeCode>> {
        let mut crops = Vec::with_capacity(2 * items.len());
        for (img, ann) in items {
            let (l, r) = self.eye_crops(img, ann)?;
            crops.push(l);
            crops.push(r);
        }
        let mut out = Vec::with_capacity(items.len());
        for chunk in crops.chunks(64) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let codes = self.encode_batch(&refs)?;
            for pair in codes.chunks(2) {
                out.push(EyeCode::new(pair[0].clone(), pair[1].clone())?);
            }
        }
        Ok(out)
    }

    /// Resampling plans for the left and right eye crops of an image.
    pub fn eye_plans(&self, annotation: &EyeAnnotation, height: usize, width: usize) -> Result<(ResamplePlan, ResamplePlan)> {
        let plan = |b: &Rect| -> Result<ResamplePlan> {
            let r = eye_crop_box(b, self.config.crop_padding_fraction)
                .clip(width, height)
                .ok_or_else(|| Error::Annotation(format!("eye box {b:?} outside image")))?;
            Ok(ResamplePlan::bilinear(
                height,
                width,
                Window {
                    x: r.x as f64,
                    y: r.y as f64,
                    w: r.w as f64,
                    h: r.h as f64,
                },
                self.config.crop_height,
                self.config.crop_width,
            ))
        };
        Ok((plan(&annotation.left_box)?, plan(&annotation.right_box)?))
    }

    pub fn eye_crops(&self, image: &Tensor, annotation: &EyeAnnotation) -> Result<(Tensor, Tensor)> {
        let (c, h, w) = image.dims3();
        let (lp, rp) = self.eye_plans(annotation, h, w)?;
        let shape = [c, self.config.crop_height, self.config.crop_width];
        let mut l = vec![0.0; shape.iter().product()];
        let mut r = l.clone();
        lp.apply(image.data(), c, &mut l);
        rp.apply(image.data(), c, &mut r);
        Ok((Tensor::from_vec(&shape, l), Tensor::from_vec(&shape, r)))
    }

    /// Eye-crop training samples for every image of a dataset.
    pub fn crop_dataset(&self, dataset: &Dataset) -> Result<Vec<EyeCropSample>> {
        let mut out = Vec::with_capacity(dataset.image_count());
        for (record, images) in dataset.records().iter().zip(dataset.images()) {
            for (entry, img) in record.images.iter().zip(images) {
                let (left, right) = self.eye_crops(img, &entry.annotation)?;
                out.push(EyeCropSample { left, right });
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set("config", &self.config)?;
        ck.set("config_hash", &config_hash(&self.config))?;
        ck.set("architecture", &self.describe())?;
        ck.push_params("compressor", &self.params);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut c = Self::new(ck.get("config")?)?;
        ck.load_params("compressor", &mut c.params)?;
        Ok(c)
    }

    /// Stores the compressor inside another model's checkpoint.
    pub fn embed(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.set("compressor_config", &self.config)?;
        ck.push_params("compressor", &self.params);
        Ok(())
    }

    /// Reads a compressor stored by [`Compressor::embed`].
    pub fn from_embedded(ck: &Checkpoint) -> Result<Self> {
        let mut c = Self::new(ck.get("compressor_config")?)?;
        ck.load_params("compressor", &mut c.params)?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn describe(&self) -> String {
        let b = self.config.base_channels;
        format!(
            "encoder: conv3x3/2 3->{b} ELU, conv3x3/2 {b}->{} ELU, dense->{}; \
             decoders (left, right): dense {}->{} ELU, up2 conv3x3 {}->{b} ELU, up2 conv3x3 {b}->3 sigmoid; \
             input {}x{}",
            2 * b,
            self.config.code_dim,
            self.config.code_dim,
            2 * b * self.config.crop_height * self.config.crop_width / 16,
            2 * b,
            self.config.crop_height,
            self.config.crop_width
        )
    }
}

/// Eye box grown by a fraction of its own width and height.
pub fn eye_crop_box(eye: &Rect, padding_fraction: f64) -> Rect {
    let px = (padding_fraction * eye.w as f64).ceil() as i32;
    let py = (padding_fraction * eye.h as f64).ceil() as i32;
    Rect::new(eye.x - px, eye.y - py, eye.w + 2 * px, eye.h + 2 * py)
}

/// Trains a compressor on eye-crop samples. Sample `i` in epoch `e` feeds its
/// left eye to the encoder when `i + e` is even and its right eye otherwise.
pub fn train_compressor(samples: &[EyeCropSample], config: &CompressorConfig) -> Result<(Compressor, CompressorCurve)> {
    let mut model = Compressor::new(config.clone())?;
    if samples.is_empty() {
        return Err(Error::Validation("no eye crops to train on".into()));
    }
    for s in samples {
        model.check_crop(&s.left)?;
        model.check_crop(&s.right)?;
    }
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
    let mut curve = CompressorCurve::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut lsum, mut rsum, mut count) = (0.0, 0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let inputs: Vec<&Tensor> = batch
                .iter()
                .map(|&i| {
                    if (i + epoch) % 2 == 0 {
                        &samples[i].left
                    } else {
                        &samples[i].right
                    }
                })
                .collect();
            let lt: Vec<&Tensor> = batch.iter().map(|&i| &samples[i].left).collect();
            let rt: Vec<&Tensor> = batch.iter().map(|&i| &samples[i].right).collect();
            let mut tape = Tape::new();
            let p = tape.bind(&model.params, true);
            let (total, l, r) = model.reconstruction_loss(
                &mut tape,
                &p,
                &Tensor::stack(&inputs),
                &Tensor::stack(&lt),
                &Tensor::stack(&rt),
            );
            let loss = tape.value(total).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("compressor loss at epoch {epoch}, step {step}"),
                });
            }
            let grads = tape.backward(total).collect(&tape, &p);
            adam.update(&mut model.params, &grads);
            let k = batch.len();
            tot += loss * k as f64;
            lsum += tape.value(l).item() * k as f64;
            rsum += tape.value(r).item() * k as f64;
            count += k;
        }
        curve.total.push(tot / count as f64);
        curve.left.push(lsum / count as f64);
        curve.right.push(rsum / count as f64);
        log::debug!("compressor epoch {epoch}: loss {:.5}", tot / count as f64);
    }
    Ok((model, curve))
}
