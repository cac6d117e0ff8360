//! The two in-painting generators.
//!
//! `DilatedConv` is fully convolutional: two stride-2 stages, a bottleneck of
//! dilated convolutions, and two upsampling stages back to full resolution.
//! It takes the masked image and mask (4 channels) and, for the reference
//! family, the reference image and its eye mask stacked on top (8 channels).
//!
//! `EncoderDecoder` squeezes the 4-channel input through four stride-2
//! convolutions into a 256-d fully-connected bottleneck, appends the 256-d eye
//! code, and decodes the 512-d vector with four upsampling stages.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Checkpoint};
use crate::compressor::EyeCode;
use crate::error::{check_shape, Error, Result};
use crate::nn::{Conv, ConvGeom, Dense, ParamBuilder, ParamSet, Tape, Var};
use crate::tensor::Tensor;

const CHECKPOINT_KIND: &str = "generator";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorVariant {
    DilatedConv,
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub variant: GeneratorVariant,
    pub base_channels: usize,
    pub input_channels: usize,
    /// Fully-connected bottleneck width (encoder-decoder only).
    pub bottleneck_dim: usize,
    pub code_dim: usize,
    /// Square input side; the encoder-decoder's dense layers depend on it.
    pub image_size: usize,
    pub dilations: Vec<usize>,
    /// Encoder-decoder only: concatenate each encoder stage's activations
    /// (and the input) onto the decoder stage of matching resolution.
    pub skip_connections: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            variant: GeneratorVariant::DilatedConv,
            base_channels: 32,
            input_channels: 4,
            bottleneck_dim: 256,
            code_dim: 256,
            image_size: 64,
            dilations: vec![2, 4, 8],
            skip_connections: false,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn dilated(input_channels: usize) -> Self {
        Self {
            input_channels,
            ..Self::default()
        }
    }

    pub fn encoder_decoder() -> Self {
        Self {
            variant: GeneratorVariant::EncoderDecoder,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("generator base_channels must be positive".into()));
        }
        match self.variant {
            GeneratorVariant::DilatedConv => {
                if self.input_channels != 4 && self.input_channels != 8 {
                    return Err(Error::Config(format!(
                        "dilated generator takes 4 or 8 input channels, got {}",
                        self.input_channels
                    )));
                }
                if self.dilations.iter().any(|&d| d == 0) {
                    return Err(Error::Config("dilation factors must be positive".into()));
                }
                if self.skip_connections {
                    return Err(Error::Config("skip connections apply to the encoder-decoder only".into()));
                }
            }
            GeneratorVariant::EncoderDecoder => {
                if self.input_channels != 4 {
                    return Err(Error::Config(format!(
                        "encoder-decoder generator takes 4 input channels plus a code, got {}",
                        self.input_channels
                    )));
                }
                if self.code_dim == 0 || self.bottleneck_dim == 0 {
                    return Err(Error::Config("encoder-decoder needs positive bottleneck and code widths".into()));
                }
                if self.image_size < 16 || self.image_size % 16 != 0 {
                    return Err(Error::Config(format!(
                        "encoder-decoder image size must be a multiple of 16, got {}",
                        self.image_size
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn uses_reference(&self) -> bool {
        self.variant == GeneratorVariant::DilatedConv && self.input_channels == 8
    }

    pub fn uses_code(&self) -> bool {
        self.variant == GeneratorVariant::EncoderDecoder
    }
}

#[derive(Clone, Debug)]
enum Layers {
    Dilated {
        head: Conv,
        down: Vec<Conv>,
        bottleneck: Vec<Conv>,
        up: Vec<Conv>,
        out: Conv,
    },
    EncoderDecoder {
        down: Vec<Conv>,
        squeeze: Dense,
        expand: Dense,
        up: Vec<Conv>,
        out: Conv,
    },
}

/// Conditioning inputs of one generator call. Which fields must be present
/// depends on the configuration.
#[derive(Clone, Copy, Debug, Default)]
pub struct Conditioning<'a> {
    pub reference: Option<&'a Tensor>,
    pub reference_eye_mask: Option<&'a Tensor>,
    pub code: Option<&'a EyeCode>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
    layers: Layers,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let mut pb = ParamBuilder::new(config.seed);
        let c3 = |s: usize| ConvGeom::same(3, s, 1);
        let layers = match config.variant {
            GeneratorVariant::DilatedConv => {
                let head = pb.conv("head", config.input_channels, b, ConvGeom::same(5, 1, 1));
                let down = vec![
                    pb.conv("down1", b, 2 * b, c3(2)),
                    pb.conv("down1b", 2 * b, 2 * b, c3(1)),
                    pb.conv("down2", 2 * b, 4 * b, c3(2)),
                    pb.conv("down2b", 4 * b, 4 * b, c3(1)),
                ];
                let mut bottleneck: Vec<Conv> = config
                    .dilations
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| pb.conv(&format!("dilated{}", i + 1), 4 * b, 4 * b, ConvGeom::same(3, 1, d)))
                    .collect();
                bottleneck.push(pb.conv("bottleneck_out", 4 * b, 4 * b, c3(1)));
                let up = vec![pb.conv("up1", 4 * b, 2 * b, c3(1)), pb.conv("up2", 2 * b, b, c3(1))];
                let out = pb.conv("out", b, 3, c3(1));
                Layers::Dilated {
                    head,
                    down,
                    bottleneck,
                    up,
                    out,
                }
            }
            GeneratorVariant::EncoderDecoder => {
                let ch = [b, 2 * b, 4 * b, 4 * b];
                let mut prev = config.input_channels;
                let mut down = Vec::new();
                for (i, &c) in ch.iter().enumerate() {
                    down.push(pb.conv(&format!("down{}", i + 1), prev, c, c3(2)));
                    prev = c;
                }
                let q = config.image_size / 16;
                let flat = 4 * b * q * q;
                let squeeze = pb.dense("bottleneck", flat, config.bottleneck_dim);
                let expand = pb.dense("expand", config.bottleneck_dim + config.code_dim, flat);
                let up_ch = [4 * b, 2 * b, b, b];
                // Skip sources by decoder stage: encoder stages 3, 2, 1, then the input.
                let skip_ch = [ch[2], ch[1], ch[0], config.input_channels];
                let mut prev = 4 * b;
                let mut up = Vec::new();
                for (i, &c) in up_ch.iter().enumerate() {
                    let extra = if config.skip_connections { skip_ch[i] } else { 0 };
                    up.push(pb.conv(&format!("up{}", i + 1), prev + extra, c, c3(1)));
                    prev = c;
                }
                let out = pb.conv("out", b, 3, c3(1));
                Layers::EncoderDecoder {
                    down,
                    squeeze,
                    expand,
                    up,
                    out,
                }
            }
        };
        Ok(Self {
            params: pb.finish(),
            layers,
            config,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Width of the vector entering the decoder (bottleneck plus code).
    pub fn decoder_input_dim(&self) -> Option<usize> {
        match &self.layers {
            Layers::EncoderDecoder { expand, .. } => Some(expand.inputs),
            Layers::Dilated { .. } => None,
        }
    }

    /// Batched forward pass. `input` is `[N, input_channels, H, W]`; `code`
    /// is `[N, code_dim]` for the encoder-decoder. Returns `[N, 3, H, W]` in
    /// `[0, 1]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &[Var], input: Var, code: Option<Var>) -> Var {
        match &self.layers {
            Layers::Dilated {
                head,
                down,
                bottleneck,
                up,
                out,
            } => {
                let mut h = head.forward(tape, p, input);
                h = tape.elu(h);
                for l in down.iter().chain(bottleneck) {
                    h = l.forward(tape, p, h);
                    h = tape.elu(h);
                }
                for l in up {
                    h = tape.upsample2(h);
                    h = l.forward(tape, p, h);
                    h = tape.elu(h);
                }
                let h = out.forward(tape, p, h);
                tape.sigmoid(h)
            }
            Layers::EncoderDecoder {
                down,
                squeeze,
                expand,
                up,
                out,
            } => {
                let n = tape.value(input).shape()[0];
                let mut h = input;
                let mut skips = vec![input];
                for l in down {
                    h = l.forward(tape, p, h);
                    h = tape.elu(h);
                    skips.push(h);
                }
                let h = tape.flatten(h);
                let h = squeeze.forward(tape, p, h);
                let h = tape.elu(h);
                let code = code.expect("encoder-decoder forward needs a code");
                let h = tape.concat(&[h, code]);
                let h = expand.forward(tape, p, h);
                let h = tape.elu(h);
                let q = self.config.image_size / 16;
                let mut h = tape.reshape(h, &[n, 4 * self.config.base_channels, q, q]);
                for (i, l) in up.iter().enumerate() {
                    h = tape.upsample2(h);
                    if self.config.skip_connections {
                        h = tape.concat(&[h, skips[3 - i]]);
                    }
                    h = l.forward(tape, p, h);
                    h = tape.elu(h);
                }
                let h = out.forward(tape, p, h);
                tape.sigmoid(h)
            }
        }
    }

    /// Bottleneck activations before the code is appended, `[N, bottleneck_dim]`.
    pub fn bottleneck(&self, masked_input: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let Layers::EncoderDecoder { down, squeeze, .. } = &self.layers else {
            return Err(Error::Config("dilated generator has no fully-connected bottleneck".into()));
        };
        check_shape(&[3, self.config.image_size, self.config.image_size], masked_input.shape())?;
        check_shape(&[1, self.config.image_size, self.config.image_size], mask.shape())?;
        let x = Tensor::concat_axis0(&[masked_input, mask]);
        let mut tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let mut h = tape.constant(x.reshape(&[1, 4, self.config.image_size, self.config.image_size]));
        for l in down {
            h = l.forward(&mut tape, &p, h);
            h = tape.elu(h);
        }
        let h = tape.flatten(h);
        let h = squeeze.forward(&mut tape, &p, h);
        let h = tape.elu(h);
        Ok(tape.value(h).clone())
    }

    /// Checks that exactly the conditioning this variant consumes is present.
    pub fn check_conditioning(&self, cond: &Conditioning) -> Result<()> {
        let has_ref = cond.reference.is_some() || cond.reference_eye_mask.is_some();
        if self.config.uses_reference() {
            if cond.reference.is_none() || cond.reference_eye_mask.is_none() {
                return Err(Error::Validation(
                    "8-channel generator needs a reference image and its eye mask".into(),
                ));
            }
        } else if has_ref {
            return Err(Error::Validation("this generator does not take a reference image".into()));
        }
        match (self.config.uses_code(), cond.code) {
            (true, None) => Err(Error::Validation("encoder-decoder generator needs an eye code".into())),
            (false, Some(_)) => Err(Error::Validation("this generator does not take an eye code".into())),
            (true, Some(c)) if c.dim() != self.config.code_dim => Err(Error::Shape {
                expected: vec![self.config.code_dim],
                actual: vec![c.dim()],
            }),
            _ => Ok(()),
        }
    }

    /// Stacks `[3,H,W]` masked input, `[1,H,W]` mask and, when used, the
    /// reference and its eye mask into one `[C,H,W]` tensor.
    pub fn input_tensor(&self, masked_input: &Tensor, mask: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        self.check_conditioning(cond)?;
        let (c, h, w) = masked_input.dims3();
        check_shape(&[3, h, w], &[c, h, w])?;
        check_shape(&[1, h, w], mask.shape())?;
        if self.config.variant == GeneratorVariant::EncoderDecoder {
            check_shape(&[3, self.config.image_size, self.config.image_size], masked_input.shape())?;
        } else if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Validation(format!(
                "dilated generator needs sides divisible by 4, got {h}x{w}"
            )));
        }
        let mut parts = vec![masked_input, mask];
        if let (Some(r), Some(rm)) = (cond.reference, cond.reference_eye_mask) {
            check_shape(masked_input.shape(), r.shape())?;
            check_shape(mask.shape(), rm.shape())?;
            parts.push(r);
            parts.push(rm);
        }
        Ok(Tensor::concat_axis0(&parts))
    }

    /// In-paints one image. Returns the raw `[3,H,W]` generator output.
    pub fn generate(&self, masked_input: &Tensor, mask: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let x = self.input_tensor(masked_input, mask, cond)?;
        let (c, h, w) = x.dims3();
        let mut tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let xv = tape.constant(x.reshape(&[1, c, h, w]));
        let code = cond.code.map(|code| tape.constant(Tensor::from_vec(&[1, code.dim()], code.combined())));
        let y = self.forward_on_tape(&mut tape, &p, xv, code);
        let out = tape.value(y).clone().reshape(&[3, h, w]);
        if !out.all_finite() {
            return Err(Error::NonFinite {
                context: "generator output".into(),
            });
        }
        Ok(out)
    }

    pub fn describe(&self) -> String {
        let b = self.config.base_channels;
        match self.config.variant {
            GeneratorVariant::DilatedConv => format!(
                "dilated-conv: conv5x5 {}->{b}, conv3x3/2 ->{}, conv3x3, conv3x3/2 ->{}, conv3x3, \
                 dilated conv3x3 x{:?}, conv3x3, 2x(up2 conv3x3) ->{b}, conv3x3 ->3 sigmoid; ELU",
                self.config.input_channels,
                2 * b,
                4 * b,
                self.config.dilations
            ),
            GeneratorVariant::EncoderDecoder => format!(
                "encoder-decoder: 4x conv3x3/2 ({b},{},{},{}), dense ->{}, concat code {} ->{}, dense, \
                 4x(up2 conv3x3), conv3x3 ->3 sigmoid; ELU; input {}x{}",
                2 * b,
                4 * b,
                4 * b,
                self.config.bottleneck_dim,
                self.config.code_dim,
                self.config.bottleneck_dim + self.config.code_dim,
                self.config.image_size,
                self.config.image_size
            ),
        }
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.set(&format!("{prefix}_config"), &self.config)?;
        ck.set(&format!("{prefix}_architecture"), &self.describe())?;
        ck.push_params(prefix, &self.params);
        Ok(())
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let config: GeneratorConfig = ck.get(&format!("{prefix}_config"))?;
        let mut g = Self::new(config)?;
        ck.load_params(prefix, &mut g.params)?;
        Ok(g)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set("config_hash", &config_hash(&self.config))?;
        self.write_checkpoint(&mut ck, "generator")?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::read_checkpoint(ck, "generator")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_param_gradients;

    fn image(c: usize, s: usize, seed: u64) -> Tensor {
        Tensor::from_vec(
            &[c, s, s],
            (0..c * s * s).map(|i| (((i as u64 * 7919 + seed * 31) % 255) as f64) / 255.0).collect(),
        )
    }

    fn code(v: f64) -> EyeCode {
        EyeCode::new(vec![v; 128], vec![-v; 128]).unwrap()
    }

    #[test]
    fn dilated_output_matches_input_size() {
        let g = Generator::new(GeneratorConfig {
            base_channels: 4,
            ..GeneratorConfig::dilated(4)
        })
        .unwrap();
        let y = g.generate(&image(3, 64, 1), &Tensor::zeros(&[1, 64, 64]), &Conditioning::default()).unwrap();
        assert_eq!(y.shape(), &[3, 64, 64]);
        assert!(y.min() >= 0.0 && y.max() <= 1.0);
        // Fully convolutional: a larger image goes through the same weights.
        let y = g.generate(&image(3, 128, 1), &Tensor::zeros(&[1, 128, 128]), &Conditioning::default()).unwrap();
        assert_eq!(y.shape(), &[3, 128, 128]);
    }

    #[test]
    fn encoder_decoder_bottleneck_widths() {
        let g = Generator::new(GeneratorConfig {
            base_channels: 4,
            ..GeneratorConfig::encoder_decoder()
        })
        .unwrap();
        let z = g.bottleneck(&image(3, 64, 2), &Tensor::zeros(&[1, 64, 64])).unwrap();
        assert_eq!(z.shape(), &[1, 256]);
        assert_eq!(g.decoder_input_dim(), Some(512));
        let y = g
            .generate(
                &image(3, 64, 2),
                &Tensor::zeros(&[1, 64, 64]),
                &Conditioning {
                    code: Some(&code(0.3)),
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(y.shape(), &[3, 64, 64]);
    }

    #[test]
    fn variant_and_input_pairing_is_enforced() {
        assert!(Generator::new(GeneratorConfig::dilated(5)).is_err());
        assert!(Generator::new(GeneratorConfig {
            input_channels: 8,
            ..GeneratorConfig::encoder_decoder()
        })
        .is_err());
        let small = |c: GeneratorConfig| Generator::new(GeneratorConfig { base_channels: 2, ..c }).unwrap();
        let (x, m) = (image(3, 32, 0), Tensor::zeros(&[1, 32, 32]));
        let c = code(0.1);
        let with_code = Conditioning {
            code: Some(&c),
            ..Default::default()
        };
        let with_ref = Conditioning {
            reference: Some(&x),
            reference_eye_mask: Some(&m),
            code: None,
        };
        let plain = small(GeneratorConfig::dilated(4));
        assert!(plain.generate(&x, &m, &with_code).is_err());
        assert!(plain.generate(&x, &m, &with_ref).is_err());
        let refg = small(GeneratorConfig::dilated(8));
        assert!(refg.generate(&x, &m, &Conditioning::default()).is_err());
        assert!(refg.generate(&x, &m, &with_ref).is_ok());
        let codeg = small(GeneratorConfig {
            image_size: 32,
            ..GeneratorConfig::encoder_decoder()
        });
        assert!(codeg.generate(&x, &m, &Conditioning::default()).is_err());
        assert!(codeg.generate(&x, &m, &with_ref).is_err());
        assert!(codeg.generate(&x, &m, &with_code).is_ok());
    }

    #[test]
    fn equal_seeds_give_equal_weights() {
        let a = Generator::new(GeneratorConfig::dilated(8)).unwrap();
        let b = Generator::new(GeneratorConfig::dilated(8)).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Generator::new(GeneratorConfig {
            seed: 1,
            ..GeneratorConfig::dilated(8)
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn output_range_holds_for_extreme_inputs() {
        let g = Generator::new(GeneratorConfig {
            base_channels: 2,
            ..GeneratorConfig::dilated(4)
        })
        .unwrap();
        let x = image(3, 16, 3).map(|v| (v - 0.5) * 1e4);
        let y = g.generate(&x, &Tensor::full(&[1, 16, 16], 1.0), &Conditioning::default()).unwrap();
        assert!(y.min() >= 0.0 && y.max() <= 1.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for cfg in [
            GeneratorConfig {
                base_channels: 2,
                dilations: vec![2],
                ..GeneratorConfig::dilated(8)
            },
            GeneratorConfig {
                base_channels: 2,
                image_size: 16,
                bottleneck_dim: 4,
                code_dim: 6,
                ..GeneratorConfig::encoder_decoder()
            },
            GeneratorConfig {
                base_channels: 2,
                image_size: 16,
                bottleneck_dim: 4,
                code_dim: 6,
                skip_connections: true,
                ..GeneratorConfig::encoder_decoder()
            },
        ] {
            let g = Generator::new(cfg.clone()).unwrap();
            let c = cfg.input_channels;
            let x = image(c, 16, 5).reshape(&[1, c, 16, 16]);
            let code = Tensor::from_vec(&[1, 6], vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.2]);
            let run = |params: &ParamSet, trainable: bool| {
                let mut tape = Tape::new();
                let p = tape.bind(params, trainable);
                let xv = tape.constant(x.clone());
                let cv = g.config().uses_code().then(|| tape.constant(code.clone()));
                let y = g.forward_on_tape(&mut tape, &p, xv, cv);
                let loss = tape.mean_abs_diff(y, &Tensor::zeros(tape.value(y).shape()));
                let value = tape.value(loss).item();
                let grads = trainable.then(|| tape.backward(loss).collect(&tape, &p));
                (value, grads)
            };
            let grads = run(g.params(), true).1.unwrap();
            let check = check_param_gradients(g.params(), &grads, 4, 1e-5, 11, |p| run(p, false).0);
            assert!(check.max_relative_error < 1e-4, "{:?} {:?}", cfg.variant, check);
        }
    }
}
