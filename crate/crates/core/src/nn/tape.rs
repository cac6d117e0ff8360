//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Every operation evaluates eagerly and appends a node; [`Tape::backward`]
//! walks the nodes in reverse. Nodes whose inputs never require a gradient are
//! skipped, so constants (frozen networks, images) cost nothing on the way
//! back.

use super::kernels::{col2im, gemm, im2col, upsample2, upsample2_backward, ConvGeom};
use super::params::ParamSet;
use super::resample::ResamplePlan;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Var },
    Elu(Var),
    Sigmoid(Var),
    Upsample2(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Resample { x: Var, plans: Vec<ResamplePlan> },
    Composite { g: Var, mask: Tensor },
    MeanAbsDiff { x: Var, target: Tensor },
    BceLogits { x: Var, targets: Vec<f64> },
    SoftmaxXent { x: Var, labels: Vec<usize> },
    RowL2 { x: Var, target: Tensor },
    Scale { x: Var, k: f64 },
    Add(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tape node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for `vars`, substituting zeros where none flowed.
    pub fn collect(&self, tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|&v| {
                self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Places every tensor of `params` on the tape, in order.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> Vec<Var> {
        params
            .tensors()
            .iter()
            .map(|t| self.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[1], c, "conv input channel mismatch: weight {ws:?}, input channels {c}");
        assert_eq!(ws[2], geom.kernel);
        let o = ws[0];
        let (ho, wo) = (geom.output_size(h), geom.output_size(wd));
        let ckk = c * geom.kernel * geom.kernel;
        let mut out = vec![0.0; n * o * ho * wo];
        let mut cols = vec![0.0; ckk * ho * wo];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for i in 0..n {
            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, &geom, &mut cols);
            let dst = &mut out[i * o * ho * wo..(i + 1) * o * ho * wo];
            for (oc, row) in dst.chunks_mut(ho * wo).enumerate() {
                row.fill(bv[oc]);
            }
            gemm(o, ckk, ho * wo, wv, false, &cols, false, dst, 1.0);
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::from_vec(&[n, o, ho, wo], out),
            Op::Conv2d { x, w, b, geom },
            needs,
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [N, F]");
        let (n, f) = (xs[0], xs[1]);
        let ws = self.value(w).shape();
        assert_eq!(ws[1], f, "linear input width mismatch");
        let o = ws[0];
        let bv = self.value(b).data();
        let mut out: Vec<f64> = (0..n).flat_map(|_| bv.iter().copied()).collect();
        gemm(n, f, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, 1.0);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::from_vec(&[n, o], out), Op::Linear { x, w, b }, needs)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { a.exp_m1() });
        let needs = self.needs(x);
        self.push(v, Op::Elu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let mut out = vec![0.0; n * c * 4 * h * w];
        upsample2(self.value(x).data(), n * c, h, w, &mut out);
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[n, c, 2 * h, 2 * w], out), Op::Upsample2(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let needs = self.needs(x);
        self.push(v, Op::Reshape(x), needs)
    }

    /// Flattens `[N, ...]` to `[N, F]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let s = self.value(x).shape();
        let n = s[0];
        let f = s[1..].iter().product::<usize>();
        self.reshape(x, &[n, f])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_axis1(&tensors);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::Concat(parts.to_vec()), needs)
    }

    /// Applies one resampling plan per batch entry to every channel.
    pub fn resample(&mut self, x: Var, plans: Vec<ResamplePlan>) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(plans.len(), n, "one resample plan per batch entry");
        let (oh, ow) = plans[0].out_dims();
        let mut out = vec![0.0; n * c * oh * ow];
        let xv = self.value(x).data();
        for (i, plan) in plans.iter().enumerate() {
            assert_eq!(plan.src_dims(), (h, w));
            assert_eq!(plan.out_dims(), (oh, ow));
            plan.apply(
                &xv[i * c * h * w..(i + 1) * c * h * w],
                c,
                &mut out[i * c * oh * ow..(i + 1) * c * oh * ow],
            );
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[n, c, oh, ow], out), Op::Resample { x, plans }, needs)
    }

    /// `g * mask + original * (1 - mask)`; `mask` is `[N, 1, H, W]`.
    pub fn composite(&mut self, g: Var, original: &Tensor, mask: &Tensor) -> Var {
        let (n, c, h, w) = self.value(g).dims4();
        assert_eq!(original.shape(), self.value(g).shape());
        assert_eq!(mask.shape(), &[n, 1, h, w]);
        let gv = self.value(g).data();
        let mut out = vec![0.0; n * c * h * w];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..h * w {
                    let m = mask.data()[i * h * w + p];
                    let idx = (i * c + ch) * h * w + p;
                    out[idx] = gv[idx] * m + original.data()[idx] * (1.0 - m);
                }
            }
        }
        let needs = self.needs(g);
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::Composite {
                g,
                mask: mask.clone(),
            },
            needs,
        )
    }

    /// Mean absolute difference to a constant target.
    pub fn mean_abs_diff(&mut self, x: Var, target: &Tensor) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape(), target.shape(), "mean_abs_diff shape mismatch");
        let loss = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / v.len() as f64;
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(loss),
            Op::MeanAbsDiff {
                x,
                target: target.clone(),
            },
            needs,
        )
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `targets`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), targets.len(), "one target per logit");
        let loss = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| softplus(z) - z * t)
            .sum::<f64>()
            / targets.len() as f64;
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                x,
                targets: targets.to_vec(),
            },
            needs,
        )
    }

    /// Mean softmax cross-entropy of rows of `x` (`[N, K]`).
    pub fn softmax_cross_entropy(&mut self, x: Var, labels: &[usize]) -> Var {
        let v = self.value(x);
        let (n, k) = (v.shape()[0], v.shape()[1]);
        assert_eq!(labels.len(), n);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &v.data()[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|r| (r - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxXent {
                x,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    /// Mean over rows of the Euclidean distance to a constant target.
    pub fn row_l2_distance(&mut self, x: Var, target: &Tensor) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape(), target.shape());
        let (n, f) = (v.shape()[0], v.len() / v.shape()[0]);
        let mut total = 0.0;
        for i in 0..n {
            let sq: f64 = (0..f)
                .map(|j| {
                    let d = v.data()[i * f + j] - target.data()[i * f + j];
                    d * d
                })
                .sum();
            total += sq.sqrt();
        }
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(total / n as f64),
            Op::RowL2 {
                x,
                target: target.clone(),
            },
            needs,
        )
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).scale(k);
        let needs = self.needs(x);
        self.push(v, Op::Scale { x, k }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (n, c, h, wd) = self.value(*x).dims4();
                    let ws = self.value(*w).shape();
                    let o = ws[0];
                    let (ho, wo) = (geom.output_size(h), geom.output_size(wd));
                    let ckk = c * geom.kernel * geom.kernel;
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let want_w = self.needs(*w) || self.needs(*b);
                    let want_x = self.needs(*x);
                    let mut dw = vec![0.0; o * ckk];
                    let mut db = vec![0.0; o];
                    let mut dx = if want_x { vec![0.0; n * c * h * wd] } else { Vec::new() };
                    let mut cols = vec![0.0; ckk * ho * wo];
                    for i in 0..n {
                        let dyi = &dy.data()[i * o * ho * wo..(i + 1) * o * ho * wo];
                        if want_w {
                            im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, geom, &mut cols);
                            gemm(o, ho * wo, ckk, dyi, false, &cols, true, &mut dw, 1.0);
                            for (oc, row) in dyi.chunks(ho * wo).enumerate() {
                                db[oc] += row.iter().sum::<f64>();
                            }
                        }
                        if want_x {
                            gemm(ckk, o, ho * wo, wv, true, dyi, false, &mut cols, 0.0);
                            col2im(&cols, c, h, wd, geom, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
                        }
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, Tensor::from_vec(ws, dw));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, Tensor::from_vec(&[o], db));
                    }
                    if want_x {
                        accumulate(&mut grads, *x, Tensor::from_vec(&[n, c, h, wd], dx));
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (n, f) = (xs[0], xs[1]);
                    let o = self.value(*w).shape()[0];
                    if self.needs(*x) {
                        let mut dx = vec![0.0; n * f];
                        gemm(n, o, f, dy.data(), false, self.value(*w).data(), false, &mut dx, 0.0);
                        accumulate(&mut grads, *x, Tensor::from_vec(&[n, f], dx));
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0; o * f];
                        gemm(o, n, f, dy.data(), true, self.value(*x).data(), false, &mut dw, 0.0);
                        accumulate(&mut grads, *w, Tensor::from_vec(&[o, f], dw));
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; o];
                        for row in dy.data().chunks(o) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::from_vec(&[o], db));
                    }
                }
                Op::Elu(x) => {
                    let g = dy.zip_map(&node.value, |d, y| if y > 0.0 { d } else { d * (y + 1.0) });
                    accumulate(&mut grads, *x, g);
                }
                Op::Sigmoid(x) => {
                    let g = dy.zip_map(&node.value, |d, s| d * s * (1.0 - s));
                    accumulate(&mut grads, *x, g);
                }
                Op::Upsample2(x) => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let mut dx = vec![0.0; n * c * h * w];
                    upsample2_backward(dy.data(), n * c, h, w, &mut dx);
                    accumulate(&mut grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, dy.reshape(&shape));
                }
                Op::Concat(parts) => {
                    let n = node.value.shape()[0];
                    let rest: usize = node.value.shape()[2..].iter().product();
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).shape()[1];
                        if self.needs(p) {
                            let mut g = Vec::with_capacity(n * width * rest);
                            for i in 0..n {
                                let start = (i * total + offset) * rest;
                                g.extend_from_slice(&dy.data()[start..start + width * rest]);
                            }
                            let shape = self.value(p).shape().to_vec();
                            accumulate(&mut grads, p, Tensor::from_vec(&shape, g));
                        }
                        offset += width;
                    }
                }
                Op::Resample { x, plans } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let (oh, ow) = plans[0].out_dims();
                    let mut dx = vec![0.0; n * c * h * w];
                    for (i, plan) in plans.iter().enumerate() {
                        plan.adjoint(
                            &dy.data()[i * c * oh * ow..(i + 1) * c * oh * ow],
                            c,
                            &mut dx[i * c * h * w..(i + 1) * c * h * w],
                        );
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                Op::Composite { g, mask } => {
                    let (n, c, h, w) = node.value.dims4();
                    let mut dg = dy.into_data();
                    for i in 0..n {
                        for ch in 0..c {
                            for p in 0..h * w {
                                dg[(i * c + ch) * h * w + p] *= mask.data()[i * h * w + p];
                            }
                        }
                    }
                    accumulate(&mut grads, *g, Tensor::from_vec(&[n, c, h, w], dg));
                }
                Op::MeanAbsDiff { x, target } => {
                    let scale = dy.item() / target.len() as f64;
                    let g = self
                        .value(*x)
                        .zip_map(target, |a, b| scale * (a - b).signum() * ((a != b) as u8 as f64));
                    accumulate(&mut grads, *x, g);
                }
                Op::BceLogits { x, targets } => {
                    let scale = dy.item() / targets.len() as f64;
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| scale * (sigmoid(z) - t))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), data));
                }
                Op::SoftmaxXent { x, labels } => {
                    let xv = self.value(*x);
                    let (n, k) = (xv.shape()[0], xv.shape()[1]);
                    let scale = dy.item() / n as f64;
                    let mut g = vec![0.0; n * k];
                    for (i, &label) in labels.iter().enumerate() {
                        let row = &xv.data()[i * k..(i + 1) * k];
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|r| (r - m).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - m).exp() / z;
                            g[i * k + j] = scale * (p - (j == label) as u8 as f64);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[n, k], g));
                }
                Op::RowL2 { x, target } => {
                    let xv = self.value(*x);
                    let n = xv.shape()[0];
                    let f = xv.len() / n;
                    let scale = dy.item() / n as f64;
                    let mut g = vec![0.0; xv.len()];
                    for i in 0..n {
                        let diff: Vec<f64> = (0..f)
                            .map(|j| xv.data()[i * f + j] - target.data()[i * f + j])
                            .collect();
                        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            for j in 0..f {
                                g[i * f + j] = scale * diff[j] / norm;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), g));
                }
                Op::Scale { x, k } => {
                    accumulate(&mut grads, *x, dy.scale(*k));
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
            }
        }
        Gradients { grads }
    }
}
