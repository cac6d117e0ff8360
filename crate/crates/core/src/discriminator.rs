//! Global/local discriminator with an optional reference branch or code
//! fusion head.
//!
//! Each branch is four stride-2 5x5 convolutions followed by a dense layer.
//! Without code fusion the branch outputs are concatenated and mapped to one
//! logit. With code fusion the branch outputs and the eye code go through a
//! small two-layer fully-connected head instead.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::compressor::EyeCode;
use crate::error::{check_shape, Error, Result};
use crate::nn::{Conv, ConvGeom, Dense, ParamBuilder, ParamSet, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Adds a third branch over the raw reference image.
    pub with_reference: bool,
    /// Fuses the eye code with the branch outputs in a fully-connected head.
    pub code_fusion: bool,
    pub base_channels: usize,
    /// Width of each branch's output; 1 gives one scalar per branch.
    pub branch_output_dim: usize,
    /// Hidden layer widths of the fusion head.
    pub fusion_hidden: Vec<usize>,
    pub code_dim: usize,
    pub image_size: usize,
    pub local_height: usize,
    pub local_width: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            with_reference: false,
            code_fusion: false,
            base_channels: 16,
            branch_output_dim: 1,
            fusion_hidden: vec![32],
            code_dim: 256,
            image_size: 64,
            local_height: 32,
            local_width: 64,
            seed: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.with_reference && self.code_fusion {
            return Err(Error::Config(
                "reference branch and code fusion cannot be combined in one discriminator".into(),
            ));
        }
        if self.base_channels == 0 || self.branch_output_dim == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        if self.code_fusion && (self.code_dim == 0 || self.fusion_hidden.is_empty()) {
            return Err(Error::Config("code fusion needs a code width and at least one hidden layer".into()));
        }
        for (what, v) in [
            ("image size", self.image_size),
            ("local height", self.local_height),
            ("local width", self.local_width),
        ] {
            if v < 16 || v % 16 != 0 {
                return Err(Error::Config(format!("discriminator {what} must be a multiple of 16, got {v}")));
            }
        }
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        2 + usize::from(self.with_reference)
    }

    /// Input width of the head: all branch outputs plus the code if fused.
    pub fn head_input_dim(&self) -> usize {
        self.branch_count() * self.branch_output_dim + if self.code_fusion { self.code_dim } else { 0 }
    }
}

#[derive(Clone, Debug)]
struct Branch {
    convs: Vec<Conv>,
    out: Dense,
}

impl Branch {
    fn build(pb: &mut ParamBuilder, name: &str, b: usize, h: usize, w: usize, out: usize) -> Self {
        let ch = [3, b, 2 * b, 4 * b, 8 * b];
        let convs = (0..4)
            .map(|i| pb.conv(&format!("{name}.conv{}", i + 1), ch[i], ch[i + 1], ConvGeom::same(5, 2, 1)))
            .collect();
        let out = pb.dense(&format!("{name}.out"), 8 * b * (h / 16) * (w / 16), out);
        Self { convs, out }
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, p, h);
            h = tape.elu(h);
        }
        let h = tape.flatten(h);
        self.out.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
    global: Branch,
    local: Branch,
    reference: Option<Branch>,
    head: Vec<Dense>,
}

/// Inputs of one discriminator call, `[3,H,W]` images.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorInput<'a> {
    pub global: &'a Tensor,
    pub local: &'a Tensor,
    pub reference: Option<&'a Tensor>,
    pub code: Option<&'a EyeCode>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(config.seed);
        let (b, s, o) = (config.base_channels, config.image_size, config.branch_output_dim);
        let global = Branch::build(&mut pb, "global", b, s, s, o);
        let local = Branch::build(&mut pb, "local", b, config.local_height, config.local_width, o);
        let reference = config
            .with_reference
            .then(|| Branch::build(&mut pb, "reference", b, s, s, o));
        let mut head = Vec::new();
        let mut prev = config.head_input_dim();
        if config.code_fusion {
            for (i, &h) in config.fusion_hidden.iter().enumerate() {
                head.push(pb.dense(&format!("head.hidden{}", i + 1), prev, h));
                prev = h;
            }
        }
        head.push(pb.dense("head.out", prev, 1));
        Ok(Self {
            params: pb.finish(),
            config,
            global,
            local,
            reference,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
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

    /// Input width of the layer that produces the logit's first hidden
    /// layer (the fusion head) or the logit itself.
    pub fn head_input_dim(&self) -> usize {
        self.head[0].inputs
    }

    /// Batched logits `[N, 1]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        global: Var,
        local: Var,
        reference: Option<Var>,
        code: Option<Var>,
    ) -> Var {
        let mut parts = vec![self.global.forward(tape, p, global), self.local.forward(tape, p, local)];
        if let Some(branch) = &self.reference {
            let r = reference.expect("reference branch needs a reference input");
            parts.push(branch.forward(tape, p, r));
        }
        if self.config.code_fusion {
            parts.push(code.expect("code fusion needs a code input"));
        }
        let mut h = tape.concat(&parts);
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            h = layer.forward(tape, p, h);
            if i < last {
                h = tape.elu(h);
            }
        }
        h
    }

    pub fn check_input(&self, input: &DiscriminatorInput) -> Result<()> {
        let s = self.config.image_size;
        check_shape(&[3, s, s], input.global.shape())?;
        check_shape(&[3, self.config.local_height, self.config.local_width], input.local.shape())?;
        match (self.config.with_reference, input.reference) {
            (true, None) => return Err(Error::Validation("discriminator needs a reference image".into())),
            (false, Some(_)) => return Err(Error::Validation("discriminator has no reference branch".into())),
            (true, Some(r)) => check_shape(&[3, s, s], r.shape())?,
            _ => {}
        }
        match (self.config.code_fusion, input.code) {
            (true, None) => Err(Error::Validation("discriminator needs an eye code".into())),
            (false, Some(_)) => Err(Error::Validation("discriminator does not fuse an eye code".into())),
            (true, Some(c)) => check_shape(&[self.config.code_dim], &[c.dim()]),
            _ => Ok(()),
        }
    }

    /// Probability that the input is a real photograph.
    pub fn discriminate(&self, input: &DiscriminatorInput) -> Result<f64> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let batch = |t: &Tensor| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.clone().reshape(&shape)
        };
        let g = tape.constant(batch(input.global));
        let l = tape.constant(batch(input.local));
        let r = input.reference.map(|r| tape.constant(batch(r)));
        let c = input
            .code
            .map(|c| tape.constant(Tensor::from_vec(&[1, c.dim()], c.combined())));
        let logit = self.forward_on_tape(&mut tape, &p, g, l, r, c);
        let y = tape.sigmoid(logit);
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "discriminator output".into(),
            });
        }
        Ok(v)
    }

    pub fn describe(&self) -> String {
        let b = self.config.base_channels;
        let head: Vec<String> = self.head.iter().map(|d| format!("{}->{}", d.inputs, d.outputs)).collect();
        format!(
            "branches: {} x [4x conv5x5/2 ({b},{},{},{}) ELU, dense ->{}]; head dense {} (ELU between); sigmoid",
            self.config.branch_count(),
            2 * b,
            4 * b,
            8 * b,
            self.config.branch_output_dim,
            head.join(", ")
        )
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.set(&format!("{prefix}_config"), &self.config)?;
        ck.set(&format!("{prefix}_architecture"), &self.describe())?;
        ck.push_params(prefix, &self.params);
        Ok(())
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let config: DiscriminatorConfig = ck.get(&format!("{prefix}_config"))?;
        let mut d = Self::new(config)?;
        ck.load_params(prefix, &mut d.params)?;
        Ok(d)
    }
}
