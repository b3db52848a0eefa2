use std::fmt;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the input values, the output value and the gradient
/// flowing into the output, and returns one optional gradient per input.
/// Entries for inputs whose `needs_grad` flag is false are ignored.
pub trait CustomOp<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

enum Op<T: Element> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    AvgPool2d { input: Var, geom: PoolGeom },
    AdaptiveAvgPool2d { input: Var, planes: usize, h: usize, w: usize, oh: usize, ow: usize },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Relu { input: Var },
    Sigmoid { input: Var },
    Softmax { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Concat { inputs: Vec<Var> },
    Reshape { input: Var },
    Add { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    Mean { input: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::AdaptiveAvgPool2d { .. } => "adaptive_avg_pool2d",
            Op::Linear { .. } => "linear",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded forward computation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and the graph is acyclic by construction. A graph can
/// be differentiated once.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("backward_done", &self.backward_done)
            .finish()
    }
}

fn check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{op} produced NaN or infinity")))
    }
}

fn dims4(op: &'static str, what: &str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, format!("{what} must be 4-D, got {shape:?}"))),
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a tensor as a leaf. Its `requires_grad` flag decides whether a
    /// gradient is accumulated for it.
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        let rg = value.requires_grad();
        value.zero_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Leaf that always receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = dims4(OP, "input", self.shape(input))?;
        let [cout, wcin, kh, kw] = dims4(OP, "weight", self.shape(weight))?;
        if wcin != cin {
            return Err(Error::shape(
                OP,
                format!(
                    "input has {cin} channels but weight {:?} expects {wcin}",
                    self.shape(weight)
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(OP, "stride must be at least 1"));
        }
        let (Some(ho), Some(wo)) = (
            kernels::window_out(h, kh, stride, padding),
            kernels::window_out(w, kw, stride, padding),
        ) else {
            return Err(Error::shape(
                OP,
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(OP, format!("bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let geom = ConvGeom { n, cin, h, w, cout, kh, kw, stride, pad: padding, ho, wo };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    fn pool_geom(&self, op: &'static str, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<PoolGeom> {
        let [n, c, h, w] = dims4(op, "input", self.shape(input))?;
        if stride == 0 {
            return Err(Error::shape(op, "stride must be at least 1"));
        }
        if 2 * padding > kernel {
            return Err(Error::shape(op, format!("padding {padding} exceeds half of kernel {kernel}")));
        }
        let (Some(ho), Some(wo)) = (
            kernels::window_out(h, kernel, stride, padding),
            kernels::window_out(w, kernel, stride, padding),
        ) else {
            return Err(Error::shape(op, format!("kernel {kernel} larger than padded input {h}x{w}")));
        };
        Ok(PoolGeom { planes: n * c, h, w, kernel, stride, pad: padding, ho, wo })
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.pool_geom("max_pool2d", input, kernel, stride, padding)?;
        let (out, argmax) = kernels::max_pool_forward(&geom, self.value(input).data());
        let [n, c, _, _] = dims4("max_pool2d", "input", self.shape(input))?;
        let value = Tensor::new(&[n, c, geom.ho, geom.wo], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Average pool; zero padding counts toward the window size.
    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.pool_geom("avg_pool2d", input, kernel, stride, padding)?;
        let out = kernels::avg_pool_forward(&geom, self.value(input).data());
        let [n, c, _, _] = dims4("avg_pool2d", "input", self.shape(input))?;
        let value = Tensor::new(&[n, c, geom.ho, geom.wo], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::AvgPool2d { input, geom }, rg))
    }

    /// Pools each plane onto an `oh x ow` grid of (possibly overlapping) bins.
    pub fn adaptive_avg_pool2d(&mut self, input: Var, oh: usize, ow: usize) -> Result<Var> {
        const OP: &str = "adaptive_avg_pool2d";
        let [n, c, h, w] = dims4(OP, "input", self.shape(input))?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::shape(OP, format!("target {oh}x{ow} invalid for input {h}x{w}")));
        }
        let out = kernels::adaptive_avg_forward(n * c, h, w, oh, ow, self.value(input).data());
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::AdaptiveAvgPool2d { input, planes: n * c, h, w, oh, ow }, rg))
    }

    /// Affine map `x W^T + b` with `x: [N, F]`, `W: [K, F]`, `b: [K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (n, f) = match *self.shape(input) {
            [n, f] => (n, f),
            ref s => return Err(Error::shape(OP, format!("input must be 2-D, got {s:?}"))),
        };
        let (k, wf) = match *self.shape(weight) {
            [k, wf] => (k, wf),
            ref s => return Err(Error::shape(OP, format!("weight must be 2-D, got {s:?}"))),
        };
        if wf != f {
            return Err(Error::shape(OP, format!("input features {f} != weight columns {wf}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::shape(OP, format!("bias shape {:?} != [{k}]", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * k];
        T::gemm(false, true, n, k, f, T::one(), self.value(input).data(), self.value(weight).data(), T::zero(), &mut out);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            out.chunks_mut(k).for_each(|row| row.iter_mut().zip(bv).for_each(|(o, &b)| *o += b));
        }
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new(&[n, k], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    fn map_unary(&mut self, input: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.needs(input);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.map_unary(input, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.map_unary(input, stable_sigmoid, Op::Sigmoid { input })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let last = *x.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = x.data().to_vec();
        data.chunks_mut(last).for_each(softmax_row);
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    /// Training-mode batch norm over `N x H x W` per channel. Fails for a
    /// batch of one sample.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        const OP: &str = "batch_norm";
        let [n, c, h, w] = dims4(OP, "input", self.shape(input))?;
        self.check_affine(OP, c, gamma, beta)?;
        if n < 2 {
            return Err(Error::shape(OP, "training mode needs a batch of at least 2 samples"));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let x = self.value(input).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for s_ in 0..n {
                s += x[(s_ * c + ch) * hw..(s_ * c + ch + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = s / m;
            let mut ss = 0.0f64;
            for s_ in 0..n {
                ss += x[(s_ * c + ch) * hw..(s_ * c + ch + 1) * hw]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ch] = T::from_f64(mu);
            var[ch] = T::from_f64(ss / m);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        let unbiased = var.iter().map(|&v| v * T::from_f64(m / (m - 1.0))).collect();
        let out = self.apply_norm(input, gamma, beta, &mean, &inv_std, true, [n, c, h, w])?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Evaluation-mode batch norm using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let [n, c, h, w] = dims4(OP, "input", self.shape(input))?;
        self.check_affine(OP, c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(OP, format!("running statistics must have {c} channels")));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        self.apply_norm(input, gamma, beta, running_mean, &inv_std, false, [n, c, h, w])
    }

    fn check_affine(&self, op: &'static str, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                op,
                format!("scale {:?} / shift {:?} must be [{c}]", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        training: bool,
        [n, c, h, w]: [usize; 4],
    ) -> Result<Var> {
        let hw = h * w;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(&[n, c, h, w], out)?;
        let op = Op::BatchNorm { input, gamma, beta, xhat, inv_std: inv_std.to_vec(), training };
        Ok(self.push(value, op, rg))
    }

    /// Concatenates along axis 1. All inputs must agree on every other axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let first = *inputs.first().ok_or_else(|| Error::shape(OP, "no inputs"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape(OP, format!("inputs need at least 2 axes, got {s0:?}")));
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[0] != n || s[2..] != s0[2..] {
                return Err(Error::shape(OP, format!("cannot concatenate {s0:?} with {s:?}")));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[s * block..(s + 1) * block]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let rg = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let n = *s.first().ok_or_else(|| Error::shape("flatten", "scalar input"))?;
        let rest = numel(&s[1..]);
        self.reshape(input, &[n, rest])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operands {:?} and {:?} differ (no broadcasting)", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("add", lhs, rhs)?;
        let (a, b) = (self.value(lhs), self.value(rhs));
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(a.shape(), data)?;
        let rg = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, Op::Add { lhs, rhs }, rg))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("mul", lhs, rhs)?;
        let (a, b) = (self.value(lhs), self.value(rhs));
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(a.shape(), data)?;
        let rg = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, Op::Mul { lhs, rhs }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.map_unary(input, |v| v * factor, Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: T = self.value(input).data().iter().copied().sum();
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(s), Op::Sum { input }, rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s: T = x.data().iter().copied().sum::<T>() / T::from_f64(x.numel() as f64);
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(s), Op::Mean { input }, rg))
    }

    /// Records an externally defined operation whose forward value has already
    /// been computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        check_finite(op.name(), output.data())?;
        let rg = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, rg))
    }

    /// Reverse pass from a scalar `loss`. Gradients land on every node that
    /// requires one; read them with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff("backward already ran on this graph; double backward is not supported".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Autodiff(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss is not finite".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
                continue;
            }
            for (input, g) in self.node_backward(node, &dy)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], g);
                }
            }
            // keep intermediate gradients for inspection
            grads[idx] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, node: &Node<T>, dy: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let g = kernels::conv2d_backward(
                    geom,
                    val(*input).data(),
                    val(*weight).data(),
                    dy,
                    (need(*input), need(*weight), bias.is_some_and(need)),
                );
                if let Some(dx) = g.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = g.weight {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, g.bias) {
                    out.push((*b, db));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![T::zero(); val(*input).numel()];
                for (&i, &g) in argmax.iter().zip(dy) {
                    dx[i] += g;
                }
                out.push((*input, dx));
            }
            Op::AvgPool2d { input, geom } => out.push((*input, kernels::avg_pool_backward(geom, dy))),
            Op::AdaptiveAvgPool2d { input, planes, h, w, oh, ow } => {
                out.push((*input, kernels::adaptive_avg_backward(*planes, *h, *w, *oh, *ow, dy)));
            }
            Op::Linear { input, weight, bias } => {
                let x = val(*input);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let k = val(*weight).shape()[0];
                if need(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(false, false, n, f, k, T::one(), dy, val(*weight).data(), T::zero(), &mut dx);
                    out.push((*input, dx));
                }
                if need(*weight) {
                    let mut dw = vec![T::zero(); k * f];
                    T::gemm(true, false, k, f, n, T::one(), dy, x.data(), T::zero(), &mut dw);
                    out.push((*weight, dw));
                }
                if let Some(b) = bias.filter(|&b| need(b)) {
                    let mut db = vec![T::zero(); k];
                    dy.chunks(k).for_each(|row| db.iter_mut().zip(row).for_each(|(a, &g)| *a += g));
                    out.push((b, db));
                }
            }
            Op::Relu { input } => {
                let dx = val(*input)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*input, dx));
            }
            Op::Sigmoid { input } => {
                let dx = node.value.data().iter().zip(dy).map(|(&y, &g)| g * y * (T::one() - y)).collect();
                out.push((*input, dx));
            }
            Op::Softmax { input } => {
                let last = *node.value.shape().last().expect("softmax output has an axis");
                let mut dx = vec![T::zero(); dy.len()];
                for ((y, g), d) in node.value.data().chunks(last).zip(dy.chunks(last)).zip(dx.chunks_mut(last)) {
                    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for i in 0..last {
                        d[i] = y[i] * (g[i] - dot);
                    }
                }
                out.push((*input, dx));
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, training } => {
                let [n, c, h, w] = dims4("batch_norm", "input", val(*input).shape())?;
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let gv = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += dy[i] * xhat[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                if need(*input) {
                    let mut dx = vec![T::zero(); dy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for i in base..base + hw {
                                dx[i] = if *training {
                                    k * (dy[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if need(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if need(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Concat { inputs } => {
                let s = node.value.shape();
                let n = s[0];
                let inner: usize = s[2..].iter().product();
                let total = s[1] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = val(v).shape()[1] * inner;
                    if need(v) {
                        let mut dx = Vec::with_capacity(n * block);
                        for smp in 0..n {
                            let start = smp * total + offset;
                            dx.extend_from_slice(&dy[start..start + block]);
                        }
                        out.push((v, dx));
                    }
                    offset += block;
                }
            }
            Op::Reshape { input } => out.push((*input, dy.to_vec())),
            Op::Add { lhs, rhs } => {
                out.push((*lhs, dy.to_vec()));
                out.push((*rhs, dy.to_vec()));
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (val(*lhs).data(), val(*rhs).data());
                out.push((*lhs, dy.iter().zip(b).map(|(&g, &y)| g * y).collect()));
                out.push((*rhs, dy.iter().zip(a).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale { input, factor } => out.push((*input, dy.iter().map(|&g| g * *factor).collect())),
            Op::Sum { input } => out.push((*input, vec![dy[0]; val(*input).numel()])),
            Op::Mean { input } => {
                let n = val(*input).numel();
                out.push((*input, vec![dy[0] / T::from_f64(n as f64); n]));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                let grads = op.backward(&vals, &node.value, dy, &needs);
                for ((&v, g), &nd) in inputs.iter().zip(grads).zip(&needs) {
                    if let (Some(g), true) = (g, nd) {
                        if g.len() != val(v).numel() {
                            return Err(Error::Autodiff(format!(
                                "{} returned a gradient of length {} for an input with {} values",
                                op.name(),
                                g.len(),
                                val(v).numel()
                            )));
                        }
                        out.push((v, g));
                    }
                }
            }
        }
        for (_, g) in &out {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} is not finite", node.op.name())));
            }
        }
        Ok(out)
    }
}

pub(crate) fn stable_sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_row<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}
