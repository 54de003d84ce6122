//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every method on [`GradTape`] that produces a [`Var`] evaluates the forward
//! pass immediately and appends one node. [`GradTape::backward`] walks the
//! nodes in exact reverse order, so gradient accumulation is deterministic.

use super::ops::{self, BinaryKind, Window};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::kernels::{ccdc, conv2d, corr, deform, Conv2dGeometry};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Binary { a: Var, b: Var, kind: BinaryKind },
    Scale { x: Var, k: T },
    Sum { x: Var },
    Mean { x: Var },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geo: Conv2dGeometry },
    Deform { x: Var, w: Var, b: Option<Var>, offsets: Var, masks: Var, geo: Conv2dGeometry },
    Ccdc { x: Var, w: Var, b: Option<Var>, theta: T },
    Corr3d { q: Var, k: Var },
    Stack { parts: Vec<Var> },
    Upsample { x: Var, out_hw: (usize, usize) },
    Pool { x: Var, out_hw: (usize, usize) },
    Crop { x: Var, win: Window },
    Concat { parts: Vec<Var> },
    Cosine { a: Var, b: Var, eps: T },
    Mse { pred: Var, target: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind: BinaryKind::Add, .. } => "add",
            Op::Binary { kind: BinaryKind::Sub, .. } => "sub",
            Op::Binary { kind: BinaryKind::Mul, .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Reshape { .. } => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::Deform { .. } => "deform_conv2d",
            Op::Ccdc { .. } => "ccdc_hv",
            Op::Corr3d { .. } => "depthwise_corr3d",
            Op::Stack { .. } => "stack_depth",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Pool { .. } => "adaptive_avg_pool",
            Op::Crop { .. } => "crop",
            Op::Concat { .. } => "concat_channels",
            Op::Cosine { .. } => "cosine_similarity",
            Op::Mse { .. } => "mse_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations with their values and, after
/// [`GradTape::backward`], their gradients.
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in execution order, leaves excluded.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.op.name())
            .collect()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Records an input tensor. It participates in differentiation when its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let y = ops::binary(self.value(a), self.value(b), kind)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Binary { a, b, kind }, rg))
    }

    /// `a + b`; `b` may have channel extent 1 and is then broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = self.value(x).scale(k);
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Scale { x, k }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y = Tensor::scalar(v.sum() / T::lit(v.numel() as f64));
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Mean { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = ops::leaky_relu(self.value(x), slope);
        let rg = self.any_grad(&[x]);
        self.push(y, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::Reshape { x }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geo: Conv2dGeometry) -> Result<Var> {
        let y = conv2d::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geo)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(y, Op::Conv2d { x, w, b, geo }, rg))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        offsets: Var,
        masks: Var,
        geo: Conv2dGeometry,
    ) -> Result<Var> {
        let y = deform::forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            self.value(offsets),
            self.value(masks),
            geo,
        )?;
        let rg = self.any_grad(&[x, w, offsets, masks]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            y,
            Op::Deform {
                x,
                w,
                b,
                offsets,
                masks,
                geo,
            },
            rg,
        ))
    }

    /// Cross central difference convolution; `theta` is a fixed blend, not a
    /// learned parameter.
    pub fn ccdc_hv(&mut self, x: Var, w: Var, b: Option<Var>, theta: T) -> Result<Var> {
        let y = ccdc::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), theta)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(y, Op::Ccdc { x, w, b, theta }, rg))
    }

    pub fn depthwise_corr3d(&mut self, q: Var, k: Var) -> Result<Var> {
        let y = corr::depthwise_corr3d(self.value(q), self.value(k))?;
        let rg = self.any_grad(&[q, k]);
        Ok(self.push(y, Op::Corr3d { q, k }, rg))
    }

    pub fn stack_depth(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = corr::stack_depth(&values)?;
        let rg = self.any_grad(parts);
        Ok(self.push(y, Op::Stack { parts: parts.to_vec() }, rg))
    }

    pub fn corr2d_depthwise(&mut self, query: Var, kernel: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(query).dims4("corr2d_depthwise")?;
        let (kn, kc, kh, kw) = self.value(kernel).dims4("corr2d_depthwise kernel")?;
        let q5 = self.reshape(query, &[n, c, 1, h, w])?;
        let k5 = self.reshape(kernel, &[kn, kc, 1, kh, kw])?;
        let y = self.depthwise_corr3d(q5, k5)?;
        self.reshape(y, &[n, c, h, w])
    }

    /// Stacks `(query_d, query_c)` and `(kernel_d, kernel_c)` along depth in
    /// that order and correlates them, giving a `B × C × H × W` map.
    pub fn conv3d_dual(&mut self, query: [Var; 2], kernel: [Var; 2]) -> Result<Var> {
        let q = self.stack_depth(&query)?;
        let k = self.stack_depth(&kernel)?;
        let y = self.depthwise_corr3d(q, k)?;
        let s = self.value(y).shape().to_vec();
        if s[2] != 1 {
            return Err(Error::shape("conv3d_dual", format!("output depth {} instead of 1", s[2])));
        }
        self.reshape(y, &[s[0], s[1], s[3], s[4]])
    }

    pub fn bilinear_upsample(&mut self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let y = ops::bilinear_upsample(self.value(x), out_hw)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::Upsample { x, out_hw }, rg))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let y = ops::adaptive_avg_pool(self.value(x), out_hw)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::Pool { x, out_hw }, rg))
    }

    pub fn crop(&mut self, x: Var, win: Window) -> Result<Var> {
        let y = ops::crop(self.value(x), win)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::Crop { x, win }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_channels(&values)?;
        let rg = self.any_grad(parts);
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let y = ops::cosine_channels(self.value(a), self.value(b), eps)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Cosine { a, b, eps }, rg))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let y = Tensor::scalar(ops::mse(self.value(pred), self.value(target))?);
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(y, Op::Mse { pred, target }, rg))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `loss`. Returns the operations visited,
    /// in the order their backward rules ran.
    ///
    /// Every gradient-requiring node that the loss depends on ends up with a
    /// populated gradient, readable through [`GradTape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Var>> {
        if !self.nodes.iter().any(|n| !matches!(n.op, Op::Leaf)) {
            return Err(Error::Backward("the tape has no recorded operations".into()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        let mut visited = Vec::new();
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            visited.push(Var(idx));
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &g);
            self.grads[idx] = Some(g);
        }
        Ok(visited)
    }

    fn propagate(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Binary { a, b, kind } => {
                let (ga, gb) = ops::binary_backward(self.value(a), self.value(b), kind, g);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale { x, k } => self.accumulate(x, g.iter().map(|&v| v * k).collect()),
            Op::Sum { x } => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::LeakyRelu { x, slope } => {
                let gx = ops::leaky_relu_backward(self.value(x), slope, g);
                self.accumulate(x, gx);
            }
            Op::Sigmoid { x } => {
                let gx = ops::sigmoid_backward(&self.nodes[idx].value, g);
                self.accumulate(x, gx);
            }
            Op::Reshape { x } => self.accumulate(x, g.to_vec()),
            Op::Conv2d { x, w, b, geo } => {
                let gr = conv2d::backward(self.value(x), self.value(w), b.is_some(), geo, g);
                self.accumulate(x, gr.input);
                self.accumulate(w, gr.weight);
                if let (Some(b), Some(gb)) = (b, gr.bias) {
                    self.accumulate(b, gb);
                }
            }
            Op::Deform {
                x,
                w,
                b,
                offsets,
                masks,
                geo,
            } => {
                let gr = deform::backward(
                    self.value(x),
                    self.value(w),
                    b.is_some(),
                    self.value(offsets),
                    self.value(masks),
                    geo,
                    g,
                );
                self.accumulate(x, gr.input);
                self.accumulate(w, gr.weight);
                self.accumulate(offsets, gr.offsets);
                self.accumulate(masks, gr.masks);
                if let (Some(b), Some(gb)) = (b, gr.bias) {
                    self.accumulate(b, gb);
                }
            }
            Op::Ccdc { x, w, b, theta } => {
                let gr = ccdc::backward(self.value(x), self.value(w), b.is_some(), theta, g);
                self.accumulate(x, gr.input);
                self.accumulate(w, gr.weight);
                if let (Some(b), Some(gb)) = (b, gr.bias) {
                    self.accumulate(b, gb);
                }
            }
            Op::Corr3d { q, k } => {
                let (gq, gk) = corr::depthwise_corr3d_backward(self.value(q), self.value(k), g);
                self.accumulate(q, gq);
                self.accumulate(k, gk);
            }
            Op::Stack { ref parts } => {
                let shape = self.value(parts[0]).shape().to_vec();
                let grads = corr::stack_depth_backward(&shape, parts.len(), g);
                for (&p, gp) in parts.iter().zip(grads) {
                    self.accumulate(p, gp);
                }
            }
            Op::Upsample { x, out_hw } => {
                let gx = ops::bilinear_upsample_backward(self.value(x).shape(), out_hw, g);
                self.accumulate(x, gx);
            }
            Op::Pool { x, out_hw } => {
                let gx = ops::adaptive_avg_pool_backward(self.value(x).shape(), out_hw, g);
                self.accumulate(x, gx);
            }
            Op::Crop { x, win } => {
                let gx = ops::crop_backward(self.value(x).shape(), win, g);
                self.accumulate(x, gx);
            }
            Op::Concat { ref parts } => {
                let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
                let grads = ops::concat_channels_backward(&shapes, g);
                for (&p, gp) in parts.iter().zip(grads) {
                    self.accumulate(p, gp);
                }
            }
            Op::Cosine { a, b, eps } => {
                let (ga, gb) = ops::cosine_channels_backward(self.value(a), self.value(b), eps, g);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(pred), self.value(target));
                let k = T::lit(2.0) * g[0] / T::lit(p.numel() as f64);
                let gp: Vec<T> = p.data().iter().zip(t.data()).map(|(&a, &b)| k * (a - b)).collect();
                let gt: Vec<T> = gp.iter().map(|&v| -v).collect();
                self.accumulate(pred, gp);
                self.accumulate(target, gt);
            }
        }
    }
}
