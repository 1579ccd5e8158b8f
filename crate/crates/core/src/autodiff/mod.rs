//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive application in creation order, so the
//! node list is already topologically sorted and [`Tape::backward`] is a
//! single reverse sweep. Tapes are cheap and meant to be rebuilt for every
//! forward pass.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{finite_difference_check, GradCheckEntry, GradCheckReport, RELATIVE_FLOOR};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

use kernels::ConvGeometry;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
        out_channels: usize,
        cols: Vec<f64>,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    PrototypeSqDistance {
        latent: Var,
        prototypes: Var,
    },
    Sqrt {
        input: Var,
    },
    LogSimilarity {
        input: Var,
        epsilon: f64,
    },
    SpatialMax {
        input: Var,
        argmax: Vec<usize>,
    },
    MinOver {
        input: Var,
        at: usize,
    },
    MeanOver {
        input: Var,
        indices: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MaskedAbsSum {
        input: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// An append-only record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, retained for leaf nodes only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    /// Gradients of parameter-bound leaves, in tape order. A parameter bound
    /// more than once appears once per binding.
    pub fn into_param_grads(self, tape: &Tape) -> Vec<(ParamId, Tensor)> {
        tape.nodes
            .iter()
            .zip(self.grads)
            .filter_map(|(node, grad)| Some((node.param?, grad?)))
            .collect()
    }

    /// Adds every parameter-bound leaf gradient into `store`.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParameterStore) {
        for (node, grad) in tape.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                store.accumulate(id, g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, contribution: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf bound to a stored parameter; its gradient can later be
    /// accumulated with [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParameterStore, id: ParamId, requires_grad: bool) -> Var {
        let var = self.leaf(store.value(id).clone(), requires_grad);
        self.nodes[var.0].param = Some(id);
        var
    }

    /// Cross-correlation of `[C_in,H,W]` with `[C_out,C_in,kH,kW]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
        };
        if x.ndim() != 3 || k.ndim() != 4 || x.shape()[0] != k.shape()[1] || stride == 0 {
            return Err(mismatch());
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(mismatch());
        }
        let g = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = kernels::im2col(x.data(), &g);
        let mut out = vec![0.0; o * g.out_len()];
        let (pl, n) = (g.patch_len() as isize, g.out_len() as isize);
        kernels::gemm(
            o,
            g.patch_len(),
            g.out_len(),
            k.data(),
            (pl, 1),
            &cols,
            (n, 1),
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![o, g.out_h, g.out_w], out)?;
        let rg = self.rg(&[input, kernel]);
        let cols = if self.requires_grad(kernel) { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geometry: g,
                out_channels: o,
                cols,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to every spatial position of channel `c`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        if x.ndim() != 3 || b.shape() != [x.shape()[0]] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let plane = x.shape()[1] * x.shape()[2];
        let mut out = x.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bc = b.data()[c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let rg = self.rg(&[input, bias]);
        Ok(self.push(out, Op::ChannelBias { input, bias }, rg))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 3 || window == 0 || stride == 0 || window > x.shape()[1] || window > x.shape()[2] {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d",
                lhs: x.shape().to_vec(),
                rhs: vec![window, window],
            });
        }
        let dims = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (out, argmax, oh, ow) = kernels::maxpool_forward(x.data(), dims, window, stride);
        let value = Tensor::new(vec![dims.0, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let mut out = self.value(input).clone();
        match kind {
            Activation::Relu => out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Sigmoid => out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
        let rg = self.rg(&[input]);
        self.push(out, Op::Activation { input, kind }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// `weights · input (+ bias)` for `input: [n]`, `weights: [k,n]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weights);
        if w.ndim() != 2 || w.shape()[1] != x.len() {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let mut out: Vec<f64> = (0..k)
            .map(|r| {
                w.data()[r * n..(r + 1) * n]
                    .iter()
                    .zip(x.data())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        if let Some(b) = bias {
            let b = self.value(b);
            if b.len() != k {
                return Err(Error::ShapeMismatch {
                    op: "dense bias",
                    lhs: vec![k],
                    rhs: b.shape().to_vec(),
                });
            }
            out.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
        }
        let mut deps = vec![input, weights];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(vec![k], out)?, Op::Dense { input, weights, bias }, rg))
    }

    /// `-log softmax(logits)[label]`, computed with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: z.len(),
            });
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() - (z[label] - max);
        let probs = exps.iter().map(|e| e / total).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, label, probs },
            rg,
        ))
    }

    /// Squared L2 distances between every latent pixel of `[D,H,W]` and every
    /// row of `prototypes: [m,D]`, as an `[m,H,W]` volume.
    pub fn prototype_sq_distances(&mut self, latent: Var, prototypes: Var) -> Result<Var> {
        let z = self.value(latent);
        let p = self.value(prototypes);
        if z.ndim() != 3 || p.ndim() != 2 || p.shape()[1] != z.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "prototype_distances",
                lhs: z.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        let (d, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        let m = p.shape()[0];
        let hw = h * w;
        let mut out = vec![0.0; m * hw];
        for l in 0..m {
            let proto = &p.data()[l * d..(l + 1) * d];
            let dst = &mut out[l * hw..(l + 1) * hw];
            for (c, &pc) in proto.iter().enumerate() {
                let plane = &z.data()[c * hw..(c + 1) * hw];
                for (o, &zv) in dst.iter_mut().zip(plane) {
                    let diff = zv - pc;
                    *o += diff * diff;
                }
            }
        }
        let rg = self.rg(&[latent, prototypes]);
        Ok(self.push(
            Tensor::new(vec![m, h, w], out)?,
            Op::PrototypeSqDistance { latent, prototypes },
            rg,
        ))
    }

    /// Elementwise square root of a non-negative input. The derivative at 0
    /// is taken to be 0.
    pub fn sqrt(&mut self, input: Var) -> Var {
        let mut out = self.value(input).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0).sqrt());
        let rg = self.rg(&[input]);
        self.push(out, Op::Sqrt { input }, rg)
    }

    /// Elementwise `ln((d + 1) / (d + epsilon))`.
    pub fn log_similarity(&mut self, input: Var, epsilon: f64) -> Var {
        let mut out = self.value(input).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|d| *d = ((*d + 1.0) / (*d + epsilon)).ln());
        let rg = self.rg(&[input]);
        self.push(out, Op::LogSimilarity { input, epsilon }, rg)
    }

    /// Per-channel maximum over the spatial grid: `[m,H,W] -> [m]`.
    pub fn spatial_max(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 3 {
            return Err(Error::ShapeMismatch {
                op: "spatial_max",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let hw = x.shape()[1] * x.shape()[2];
        let mut out = Vec::with_capacity(x.shape()[0]);
        let mut argmax = Vec::with_capacity(x.shape()[0]);
        for (l, chunk) in x.data().chunks(hw).enumerate() {
            let a = crate::tensor::argmax(chunk);
            out.push(chunk[a]);
            argmax.push(l * hw + a);
        }
        let rg = self.rg(&[input]);
        let value = Tensor::new(vec![out.len()], out)?;
        Ok(self.push(value, Op::SpatialMax { input, argmax }, rg))
    }

    /// Minimum over the given flat indices (first on ties) as a scalar.
    pub fn min_over(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let Some(&first) = indices.first() else {
            return Err(Error::InvalidArgument("min_over needs at least one index".into()));
        };
        if indices.iter().any(|&i| i >= x.len()) {
            return Err(Error::InvalidArgument("min_over index out of range".into()));
        }
        let mut at = first;
        for &i in indices {
            if x.data()[i] < x.data()[at] {
                at = i;
            }
        }
        let value = Tensor::scalar(x.data()[at]);
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MinOver { input, at }, rg))
    }

    /// Mean over the given flat indices as a scalar.
    pub fn mean_over(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if indices.is_empty() || indices.iter().any(|&i| i >= x.len()) {
            return Err(Error::InvalidArgument("mean_over needs in-range indices".into()));
        }
        let mean = indices.iter().map(|&i| x.data()[i]).sum::<f64>() / indices.len() as f64;
        let rg = self.rg(&[input]);
        let indices = indices.to_vec();
        Ok(self.push(Tensor::scalar(mean), Op::MeanOver { input, indices }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x *= factor);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// `Σ |x_i|` over entries where `mask[i]` is set.
    pub fn masked_abs_sum(&mut self, input: Var, mask: Vec<bool>) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_abs_sum",
                lhs: x.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let total = x
            .data()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v.abs())
            .sum();
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(total), Op::MaskedAbsSum { input, mask }, rg))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geometry,
                out_channels,
                cols,
            } => {
                let (o, pl, n) = (*out_channels, geometry.patch_len(), geometry.out_len());
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; o * pl];
                    // dK = dY · colsᵀ
                    kernels::gemm(o, n, pl, gd, (n as isize, 1), cols, (1, n as isize), 0.0, &mut dk);
                    let shape = self.value(*kernel).shape().to_vec();
                    accumulate(grads, *kernel, Tensor::new(shape, dk).expect("kernel grad shape"));
                }
                if self.wants(*input) {
                    let k = self.value(*kernel).data();
                    let mut dcols = vec![0.0; pl * n];
                    // dcols = Kᵀ · dY
                    kernels::gemm(pl, o, n, k, (1, pl as isize), gd, (n as isize, 1), 0.0, &mut dcols);
                    let x = self.value(*input);
                    let mut dx = vec![0.0; x.len()];
                    kernels::col2im(&dcols, geometry, &mut dx);
                    accumulate(
                        grads,
                        *input,
                        Tensor::new(x.shape().to_vec(), dx).expect("input grad shape"),
                    );
                }
            }
            Op::ChannelBias { input, bias } => {
                if self.wants(*bias) {
                    let channels = self.value(*bias).len();
                    let plane = gd.len() / channels;
                    let db: Vec<f64> = gd.chunks(plane).map(|c| c.iter().sum()).collect();
                    accumulate(grads, *bias, Tensor::new(vec![channels], db).expect("bias grad"));
                }
                if self.wants(*input) {
                    accumulate(grads, *input, g.clone());
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.wants(*input) {
                    let mut dx = Tensor::zeros(self.value(*input).shape());
                    for (&src, &gv) in argmax.iter().zip(gd) {
                        dx.data_mut()[src] += gv;
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let data = match kind {
                    Activation::Relu => x
                        .iter()
                        .zip(gd)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => y.iter().zip(gd).map(|(&s, &gv)| gv * s * (1.0 - s)).collect(),
                };
                accumulate(
                    grads,
                    *input,
                    Tensor::new(g.shape().to_vec(), data).expect("activation grad"),
                );
            }
            Op::Dense { input, weights, bias } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                let n = x.len();
                if self.wants(*weights) {
                    let dw = Tensor::from_fn(w.shape(), |i| gd[i / n] * x.data()[i % n]);
                    accumulate(grads, *weights, dw);
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; n];
                    for (r, &gv) in gd.iter().enumerate() {
                        for (d, wv) in dx.iter_mut().zip(&w.data()[r * n..(r + 1) * n]) {
                            *d += gv * wv;
                        }
                    }
                    accumulate(
                        grads,
                        *input,
                        Tensor::new(x.shape().to_vec(), dx).expect("dense input grad"),
                    );
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        accumulate(
                            grads,
                            *b,
                            Tensor::new(self.value(*b).shape().to_vec(), gd.to_vec()).expect("dense bias grad"),
                        );
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, label, probs } => {
                let scale = gd[0];
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| scale * (p - if i == *label { 1.0 } else { 0.0 }))
                    .collect();
                let shape = self.value(*logits).shape().to_vec();
                accumulate(grads, *logits, Tensor::new(shape, data).expect("ce grad"));
            }
            Op::PrototypeSqDistance { latent, prototypes } => {
                let z = self.value(*latent);
                let p = self.value(*prototypes);
                let (d, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
                let hw = h * w;
                let m = p.shape()[0];
                let want_z = self.wants(*latent);
                let want_p = self.wants(*prototypes);
                let mut dz = vec![0.0; if want_z { z.len() } else { 0 }];
                let mut dp = vec![0.0; if want_p { p.len() } else { 0 }];
                for l in 0..m {
                    let gl = &gd[l * hw..(l + 1) * hw];
                    for c in 0..d {
                        let pc = p.data()[l * d + c];
                        let plane = &z.data()[c * hw..(c + 1) * hw];
                        let mut acc = 0.0;
                        if want_z {
                            let dplane = &mut dz[c * hw..(c + 1) * hw];
                            for ((dzv, &zv), &gv) in dplane.iter_mut().zip(plane).zip(gl) {
                                let t = 2.0 * gv * (zv - pc);
                                *dzv += t;
                                acc += t;
                            }
                        } else {
                            for (&zv, &gv) in plane.iter().zip(gl) {
                                acc += 2.0 * gv * (zv - pc);
                            }
                        }
                        if want_p {
                            dp[l * d + c] -= acc;
                        }
                    }
                }
                if want_z {
                    accumulate(
                        grads,
                        *latent,
                        Tensor::new(z.shape().to_vec(), dz).expect("latent grad"),
                    );
                }
                if want_p {
                    accumulate(
                        grads,
                        *prototypes,
                        Tensor::new(p.shape().to_vec(), dp).expect("prototype grad"),
                    );
                }
            }
            Op::Sqrt { input } => {
                let y = node.value.data();
                let data = y
                    .iter()
                    .zip(gd)
                    .map(|(&s, &gv)| if s > 0.0 { gv / (2.0 * s) } else { 0.0 })
                    .collect();
                accumulate(grads, *input, Tensor::new(g.shape().to_vec(), data).expect("sqrt grad"));
            }
            Op::LogSimilarity { input, epsilon } => {
                let x = self.value(*input).data();
                let data = x
                    .iter()
                    .zip(gd)
                    .map(|(&d, &gv)| gv * (1.0 / (d + 1.0) - 1.0 / (d + epsilon)))
                    .collect();
                accumulate(
                    grads,
                    *input,
                    Tensor::new(g.shape().to_vec(), data).expect("similarity grad"),
                );
            }
            Op::SpatialMax { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx.data_mut()[src] += gv;
                }
                accumulate(grads, *input, dx);
            }
            Op::MinOver { input, at } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                dx.data_mut()[*at] = gd[0];
                accumulate(grads, *input, dx);
            }
            Op::MeanOver { input, indices } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                let share = gd[0] / indices.len() as f64;
                for &i in indices {
                    dx.data_mut()[i] += share;
                }
                accumulate(grads, *input, dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let mut neg = g.clone();
                    neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                    accumulate(grads, *b, neg);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let data = y.data().iter().zip(gd).map(|(q, gv)| q * gv).collect();
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data).expect("mul grad"));
                }
                if self.wants(*b) {
                    let data = x.data().iter().zip(gd).map(|(p, gv)| p * gv).collect();
                    accumulate(grads, *b, Tensor::new(g.shape().to_vec(), data).expect("mul grad"));
                }
            }
            Op::Scale(a, factor) => {
                let mut s = g.clone();
                s.data_mut().iter_mut().for_each(|v| *v *= factor);
                accumulate(grads, *a, s);
            }
            Op::Sum(a) => {
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gd[0]));
            }
            Op::MaskedAbsSum { input, mask } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { gd[0] * sign(v) } else { 0.0 })
                    .collect();
                accumulate(grads, *input, Tensor::new(x.shape().to_vec(), data).expect("l1 grad"));
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Sign with `sign(0) = 0`.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests;
