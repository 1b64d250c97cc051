//! Recorded-tape reverse-mode differentiation.
//!
//! Each forward call appends a node holding the output value and the operand
//! ids. [`Tape::backward`] seeds the loss gradient and walks the nodes in
//! reverse, accumulating into operand gradients and finally into the bound
//! parameter tensors. The graph is rebuilt per step; parameters persist
//! outside the tape and are bound with [`Tape::param`].

use std::rc::Rc;

use super::{SharedTensor, Tensor};
use crate::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum OpKind {
    /// Constant input; no gradient flows out of the tape from here.
    Leaf,
    /// Bound parameter; gradients are written back to `source` if trainable.
    Param { source: SharedTensor, trainable: bool },
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, stride: usize },
    Fc { input: NodeId, weight: NodeId, bias: NodeId },
    Relu { input: NodeId },
    Mul { lhs: NodeId, rhs: NodeId },
    Flatten { input: NodeId },
    /// Mean softmax cross-entropy over the batch; caches the softmax for
    /// backward.
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f32> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    op: OpKind,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool, op: OpKind) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, grad: None, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.node(id).data
    }

    /// Copy a node's value out as a standalone tensor.
    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor::new(self.node(id).shape.clone(), self.node(id).data.clone())
            .expect("tape node shape/data consistent")
    }

    /// Total bytes held by node values (and cached softmax buffers). This is
    /// the activation footprint of one recorded forward pass.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                let cached = match &n.op {
                    OpKind::SoftmaxCrossEntropy { probs, .. } => probs.len(),
                    _ => 0,
                };
                4 * (n.data.len() + cached)
            })
            .sum()
    }

    /// Record a constant input.
    pub fn input(&mut self, value: &Tensor) -> NodeId {
        self.push(value.shape().to_vec(), value.data().to_vec(), false, OpKind::Leaf)
    }

    pub fn input_slice(&mut self, shape: &[usize], data: &[f32]) -> Result<NodeId> {
        let t = Tensor::new(shape.to_vec(), data.to_vec())?;
        Ok(self.input(&t))
    }

    /// Bind a parameter tensor. When `trainable`, backward accumulates into
    /// the tensor's gradient buffer; frozen bindings never receive writes.
    pub fn param(&mut self, source: &SharedTensor, trainable: bool) -> NodeId {
        let (shape, data) = {
            let t = source.borrow();
            (t.shape().to_vec(), t.data().to_vec())
        };
        self.push(shape, data, trainable, OpKind::Param { source: Rc::clone(source), trainable })
    }

    /// Valid (unpadded) 2-D cross-correlation.
    ///
    /// `input` is `[N, C, H, W]`, `weight` `[K, C, kh, kw]`, `bias` `[K]`;
    /// the output is `[N, K, OH, OW]` with `OH = (H - kh) / stride + 1`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        if stride < 1 {
            return Err(Error::Validation("conv2d stride must be >= 1".into()));
        }
        let (ishape, wshape, bshape) =
            (self.node(input).shape.clone(), self.node(weight).shape.clone(), self.node(bias).shape.clone());
        if ishape.len() != 4 || wshape.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("expected 4-d input and weight, got {:?} and {:?}", ishape, wshape),
            });
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (k, wc, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wc != c {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("input channels {} != weight channels {}", c, wc),
            });
        }
        if bshape != [k] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("bias shape {:?} != [{}]", bshape, k),
            });
        }
        if kh > h || kw > w {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("kernel {}x{} larger than input {}x{}", kh, kw, h, w),
            });
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;

        let x = &self.node(input).data;
        let wt = &self.node(weight).data;
        let b = &self.node(bias).data;
        let mut out = vec![0.0f32; n * k * oh * ow];
        for ni in 0..n {
            for ki in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[ki];
                        for ci in 0..c {
                            let xbase = ((ni * c + ci) * h + oy * stride) * w + ox * stride;
                            let wbase = ((ki * c + ci) * kh) * kw;
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    acc += x[xbase + dy * w + dx] * wt[wbase + dy * kw + dx];
                                }
                            }
                        }
                        out[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let needs = self.node(input).needs_grad || self.node(weight).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(vec![n, k, oh, ow], out, needs, OpKind::Conv2d { input, weight, bias, stride }))
    }

    /// Fully-connected layer: `[N, D] x [O, D]^T + [O] -> [N, O]`.
    pub fn fc(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ishape, wshape, bshape) =
            (self.node(input).shape.clone(), self.node(weight).shape.clone(), self.node(bias).shape.clone());
        if ishape.len() != 2 || wshape.len() != 2 {
            return Err(Error::Shape {
                op: "fc",
                detail: format!("expected 2-d input and weight, got {:?} and {:?}", ishape, wshape),
            });
        }
        let (n, d) = (ishape[0], ishape[1]);
        let (o, wd) = (wshape[0], wshape[1]);
        if wd != d {
            return Err(Error::Shape {
                op: "fc",
                detail: format!("input dim {} != weight dim {}", d, wd),
            });
        }
        if bshape != [o] {
            return Err(Error::Shape { op: "fc", detail: format!("bias shape {:?} != [{}]", bshape, o) });
        }
        let x = &self.node(input).data;
        let wt = &self.node(weight).data;
        let b = &self.node(bias).data;
        let mut out = vec![0.0f32; n * o];
        for ni in 0..n {
            for oi in 0..o {
                let mut acc = b[oi];
                let xrow = &x[ni * d..(ni + 1) * d];
                let wrow = &wt[oi * d..(oi + 1) * d];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                out[ni * o + oi] = acc;
            }
        }
        let needs = self.node(input).needs_grad || self.node(weight).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(vec![n, o], out, needs, OpKind::Fc { input, weight, bias }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let data: Vec<f32> = self.node(input).data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.node(input).shape.clone();
        let needs = self.node(input).needs_grad;
        self.push(shape, data, needs, OpKind::Relu { input })
    }

    /// Elementwise product of two same-shape nodes.
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.node(lhs).shape != self.node(rhs).shape {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.node(lhs).shape, self.node(rhs).shape),
            });
        }
        let data: Vec<f32> =
            self.node(lhs).data.iter().zip(&self.node(rhs).data).map(|(a, b)| a * b).collect();
        let shape = self.node(lhs).shape.clone();
        let needs = self.node(lhs).needs_grad || self.node(rhs).needs_grad;
        Ok(self.push(shape, data, needs, OpKind::Mul { lhs, rhs }))
    }

    /// Collapse all axes after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = &self.node(input).shape;
        if shape.is_empty() {
            return Err(Error::Shape { op: "flatten", detail: "scalar input".into() });
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let data = self.node(input).data.clone();
        let needs = self.node(input).needs_grad;
        Ok(self.push(vec![n, rest], data, needs, OpKind::Flatten { input }))
    }

    /// Mean softmax cross-entropy over the batch. `logits` is `[N, C]`;
    /// labels must lie in `[0, C)`. Returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.node(logits).shape.clone();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("expected [N, C] logits, got {:?}", shape),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::Validation(format!("{} labels for batch of {}", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Validation(format!("label {} out of range [0, {})", bad, c)));
        }
        let x = &self.node(logits).data;
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f64;
        for ni in 0..n {
            let row = &x[ni * c..(ni + 1) * c];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0f32;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[ni * c + j] = e;
                sum += e;
            }
            for p in &mut probs[ni * c..(ni + 1) * c] {
                *p /= sum;
            }
            loss += f64::from(sum.ln() + max - row[labels[ni]]);
        }
        let loss = (loss / n as f64) as f32;
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            Vec::new(),
            vec![loss],
            needs,
            OpKind::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Reverse pass from a scalar `loss` node. Gradients accumulate into
    /// every trainable parameter bound to this tape (exactly zero for
    /// parameters the loss does not depend on); frozen bindings are never
    /// written.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before forward".into()));
        }
        if self.backward_done {
            return Err(Error::State("backward already run on this tape".into()));
        }
        if self.node(loss).data.len() != 1 {
            return Err(Error::Validation(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            match &self.nodes[i].op {
                OpKind::Leaf | OpKind::Param { .. } => {
                    self.nodes[i].grad = Some(grad);
                    continue;
                }
                OpKind::Conv2d { input, weight, bias, stride } => {
                    let (input, weight, bias, stride) = (*input, *weight, *bias, *stride);
                    self.backward_conv2d(i, input, weight, bias, stride, &grad);
                }
                OpKind::Fc { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    self.backward_fc(i, input, weight, bias, &grad);
                }
                OpKind::Relu { input } => {
                    let input = *input;
                    if self.nodes[input.0].needs_grad {
                        let dx: Vec<f32> = self.nodes[input.0]
                            .data
                            .iter()
                            .zip(&grad)
                            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                            .collect();
                        self.accum(input, &dx);
                    }
                }
                OpKind::Mul { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    if self.nodes[lhs.0].needs_grad {
                        let d: Vec<f32> =
                            self.nodes[rhs.0].data.iter().zip(&grad).map(|(&b, &g)| b * g).collect();
                        self.accum(lhs, &d);
                    }
                    if self.nodes[rhs.0].needs_grad {
                        let d: Vec<f32> =
                            self.nodes[lhs.0].data.iter().zip(&grad).map(|(&a, &g)| a * g).collect();
                        self.accum(rhs, &d);
                    }
                }
                OpKind::Flatten { input } => {
                    let input = *input;
                    if self.nodes[input.0].needs_grad {
                        self.accum(input, &grad);
                    }
                }
                OpKind::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    if self.nodes[logits.0].needs_grad {
                        let n = labels.len();
                        let c = probs.len() / n;
                        let scale = grad[0] / n as f32;
                        let mut d = probs.clone();
                        for (ni, &label) in labels.iter().enumerate() {
                            d[ni * c + label] -= 1.0;
                        }
                        for v in &mut d {
                            *v *= scale;
                        }
                        self.accum(logits, &d);
                    }
                }
            }
        }

        // Write accumulated gradients out to the bound parameters.
        for node in &mut self.nodes {
            if let OpKind::Param { source, trainable: true } = &node.op {
                match node.grad.take() {
                    Some(g) => source.borrow_mut().accumulate_grad(&g),
                    None => {
                        let zeros = vec![0.0; node.data.len()];
                        source.borrow_mut().accumulate_grad(&zeros);
                    }
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, delta: &[f32]) {
        let node = &mut self.nodes[id.0];
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn backward_conv2d(
        &mut self,
        out: usize,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        grad: &[f32],
    ) {
        let ishape = self.nodes[input.0].shape.clone();
        let wshape = self.nodes[weight.0].shape.clone();
        let oshape = self.nodes[out].shape.clone();
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (k, _, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        let (oh, ow) = (oshape[2], oshape[3]);

        let need_x = self.nodes[input.0].needs_grad;
        let need_w = self.nodes[weight.0].needs_grad;
        let need_b = self.nodes[bias.0].needs_grad;

        let mut dx = if need_x { vec![0.0f32; n * c * h * w] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0f32; self.nodes[weight.0].data.len()] } else { Vec::new() };
        let mut db = if need_b { vec![0.0f32; k] } else { Vec::new() };

        {
            let x = &self.nodes[input.0].data;
            let wt = &self.nodes[weight.0].data;
            for ni in 0..n {
                for ki in 0..k {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad[((ni * k + ki) * oh + oy) * ow + ox];
                            if need_b {
                                db[ki] += g;
                            }
                            for ci in 0..c {
                                let xbase = ((ni * c + ci) * h + oy * stride) * w + ox * stride;
                                let wbase = ((ki * c + ci) * kh) * kw;
                                for dy in 0..kh {
                                    for dxi in 0..kw {
                                        if need_w {
                                            dw[wbase + dy * kw + dxi] += g * x[xbase + dy * w + dxi];
                                        }
                                        if need_x {
                                            dx[xbase + dy * w + dxi] += g * wt[wbase + dy * kw + dxi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        if need_x {
            self.accum(input, &dx);
        }
        if need_w {
            self.accum(weight, &dw);
        }
        if need_b {
            self.accum(bias, &db);
        }
    }

    fn backward_fc(&mut self, _out: usize, input: NodeId, weight: NodeId, bias: NodeId, grad: &[f32]) {
        let (n, d) = {
            let s = &self.nodes[input.0].shape;
            (s[0], s[1])
        };
        let o = self.nodes[weight.0].shape[0];

        let need_x = self.nodes[input.0].needs_grad;
        let need_w = self.nodes[weight.0].needs_grad;
        let need_b = self.nodes[bias.0].needs_grad;

        let mut dx = if need_x { vec![0.0f32; n * d] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0f32; o * d] } else { Vec::new() };
        let mut db = if need_b { vec![0.0f32; o] } else { Vec::new() };

        {
            let x = &self.nodes[input.0].data;
            let wt = &self.nodes[weight.0].data;
            for ni in 0..n {
                for oi in 0..o {
                    let g = grad[ni * o + oi];
                    if g == 0.0 {
                        continue;
                    }
                    if need_b {
                        db[oi] += g;
                    }
                    for di in 0..d {
                        if need_w {
                            dw[oi * d + di] += g * x[ni * d + di];
                        }
                        if need_x {
                            dx[ni * d + di] += g * wt[oi * d + di];
                        }
                    }
                }
            }
        }

        if need_x {
            self.accum(input, &dx);
        }
        if need_w {
            self.accum(weight, &dw);
        }
        if need_b {
            self.accum(bias, &db);
        }
    }
}
