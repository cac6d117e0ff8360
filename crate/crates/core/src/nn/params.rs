//! Named parameter storage and the layer descriptors that index into it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::ConvGeom;
use super::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// True when `other` has the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// 2-D convolution whose weight and bias live in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        tape.conv2d(x, params[self.weight], params[self.bias], self.geom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        tape.linear(x, params[self.weight], params[self.bias])
    }
}

/// Allocates layers with fan-in scaled uniform initialisation
/// (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))`) from a seeded stream.
pub struct ParamBuilder {
    params: ParamSet,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            params: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn conv(&mut self, name: &str, inputs: usize, outputs: usize, geom: ConvGeom) -> Conv {
        let fan_in = inputs * geom.kernel * geom.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::uniform(&[outputs, inputs, geom.kernel, geom.kernel], bound, &mut self.rng);
        let b = Tensor::uniform(&[outputs], bound, &mut self.rng);
        Conv {
            weight: self.params.push(format!("{name}.weight"), w),
            bias: self.params.push(format!("{name}.bias"), b),
            geom,
            in_channels: inputs,
            out_channels: outputs,
        }
    }

    pub fn dense(&mut self, name: &str, inputs: usize, outputs: usize) -> Dense {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = Tensor::uniform(&[outputs, inputs], bound, &mut self.rng);
        let b = Tensor::uniform(&[outputs], bound, &mut self.rng);
        Dense {
            weight: self.params.push(format!("{name}.weight"), w),
            bias: self.params.push(format!("{name}.bias"), b),
            inputs,
            outputs,
        }
    }

    pub fn finish(self) -> ParamSet {
        self.params
    }
}
