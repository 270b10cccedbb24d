//! Reverse-mode autodiff on an explicit tape of f64 tensors.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and dispatches per-op gradient rules. Ops cover
//! exactly what the encoder and the score U-Net need: dense/conv linear
//! algebra, smooth activations, row/group normalization, attention plumbing
//! and fused losses. Everything is f64 so analytic gradients can be checked
//! against central finite differences at tight tolerance.

use std::collections::HashMap;

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Node index on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// x (m, n) + bias (n), broadcast over rows
    AddBiasCols(NodeId, NodeId),
    /// x (c, h, w) + bias (c), broadcast over h and w
    AddBiasChannels(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    Gelu(NodeId),
    Silu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
        stride: usize,
    },
    Upsample2x(NodeId),
    CropHw(NodeId),
    ConcatChannels(NodeId, NodeId),
    NarrowCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(NodeId, NodeId),
    SumAll(NodeId),
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to named parameter leaves.
pub type GradMap = HashMap<String, ArrayD<f64>>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[[0]]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Named trainable parameter leaf.
    pub fn param(&mut self, name: &str, value: ArrayD<f64>) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                param: Some(name.to_string()),
            },
            true,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * k);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x + k);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a, k), ng)
    }

    pub fn add_bias_cols(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix1>().unwrap();
        let v = (&xv + &bv).into_dyn();
        let ng = self.needs(x) || self.needs(b);
        self.push(v, Op::AddBiasCols(x, b), ng)
    }

    pub fn add_bias_channels(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix1>().unwrap();
        let mut v = xv.to_owned();
        for (c, mut plane) in v.outer_iter_mut().enumerate() {
            plane += bv[c];
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(v.into_dyn(), Op::AddBiasChannels(x, b), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = av.t().to_owned().into_dyn();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let old: Vec<usize> = self.nodes[a].value.shape().to_vec();
        let v = self.nodes[a]
            .value
            .clone()
            .into_shape_clone(IxDyn(shape))
            .expect("reshape element count mismatch");
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a, old), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a]
            .value
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let ng = self.needs(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * sigmoid(x));
        let ng = self.needs(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut v = av.to_owned();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let ng = self.needs(a);
        self.push(v.into_dyn(), Op::SoftmaxRows(a), ng)
    }

    /// Layer norm over the last axis of a 2-d input with per-column affine.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let g = self.nodes[gamma].value.view().into_dimensionality::<Ix1>().unwrap();
        let bta = self.nodes[beta].value.view().into_dimensionality::<Ix1>().unwrap();
        let mut v = xv.to_owned();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, r) in row.iter_mut().enumerate() {
                *r = (*r - mean) * inv * g[j] + bta[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(v.into_dyn(), Op::LayerNormRows { x, gamma, beta, eps }, ng)
    }

    /// Group norm over a (c, h, w) input with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix3>().unwrap();
        let g = self.nodes[gamma].value.view().into_dimensionality::<Ix1>().unwrap();
        let bta = self.nodes[beta].value.view().into_dimensionality::<Ix1>().unwrap();
        let (c, h, w) = xv.dim();
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        let cg = c / groups;
        let mut v = xv.to_owned();
        for gi in 0..groups {
            let slice = v.slice(ndarray::s![gi * cg..(gi + 1) * cg, .., ..]);
            let n = (cg * h * w) as f64;
            let mean = slice.sum() / n;
            let var = slice.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            let mut slice = v.slice_mut(ndarray::s![gi * cg..(gi + 1) * cg, .., ..]);
            slice.mapv_inplace(|x| (x - mean) * inv);
        }
        for (ci, mut plane) in v.outer_iter_mut().enumerate() {
            plane.mapv_inplace(|x| x * g[ci] + bta[ci]);
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            v.into_dyn(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            ng,
        )
    }

    /// 1-d convolution via im2col: x (c_in, l), w (c_out, c_in, k),
    /// bias (c_out), stride 1, symmetric zero padding.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix1>().unwrap();
        let (c_in, l) = xv.dim();
        let (c_out, c_in2, k) = wv.dim();
        assert_eq!(c_in, c_in2, "conv1d channel mismatch");
        let lo = l + 2 * pad - k + 1;
        let cols = im2col1d(&xv.to_owned(), k, pad, lo);
        let w_mat = wv
            .to_owned()
            .into_shape_clone(IxDyn(&[c_out, c_in * k]))
            .unwrap()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut out = w_mat.dot(&cols);
        for (co, mut row) in out.rows_mut().into_iter().enumerate() {
            row += bv[co];
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), Op::Conv1d { x, w, b, pad }, ng)
    }

    /// 2-d convolution via im2col: x (c_in, h, w), weights
    /// (c_out, c_in, k, k), bias (c_out). `stride` 2 halves spatial dims
    /// (ceil mode with pad 1, k 3).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize, stride: usize) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.nodes[w].value.view();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix1>().unwrap();
        let (c_in, h, wd) = xv.dim();
        let wshape = wv.shape();
        let (c_out, k) = (wshape[0], wshape[2]);
        assert_eq!(wshape[1], c_in, "conv2d channel mismatch");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;

        let cols = im2col(&xv.to_owned(), k, pad, stride, oh, ow);
        let w_mat = wv
            .to_owned()
            .into_shape_clone(IxDyn(&[c_out, c_in * k * k]))
            .unwrap()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut out = w_mat.dot(&cols); // (c_out, oh*ow)
        for (co, mut row) in out.rows_mut().into_iter().enumerate() {
            row += bv[co];
        }
        let out = out.into_shape_clone(IxDyn(&[c_out, oh, ow])).unwrap();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv2d { x, w, b, pad, stride }, ng)
    }

    /// Nearest-neighbor 2x spatial upsampling of (c, h, w).
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let mut out = ndarray::Array3::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[[ci, i, j]] = xv[[ci, i / 2, j / 2]];
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::Upsample2x(x), ng)
    }

    /// Truncates the spatial dims of (c, h, w) to (h_new, w_new).
    pub fn crop_hw(&mut self, x: NodeId, h_new: usize, w_new: usize) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix3>().unwrap();
        let v = xv
            .slice(ndarray::s![.., ..h_new, ..w_new])
            .to_owned()
            .into_dyn();
        let ng = self.needs(x);
        self.push(v, Op::CropHw(x), ng)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix3>().unwrap();
        let v = ndarray::concatenate(Axis(0), &[av.view(), bv.view()])
            .unwrap()
            .into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatChannels(a, b), ng)
    }

    /// Column slice of a 2-d node.
    pub fn narrow_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = xv
            .slice(ndarray::s![.., start..start + len])
            .to_owned()
            .into_dyn();
        let ng = self.needs(x);
        self.push(v, Op::NarrowCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .unwrap()
            .into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatCols(a, b), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        let ng = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean frame-level cross-entropy of logits (f, p) against target ids.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.nodes[logits]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        assert_eq!(lv.nrows(), targets.len(), "one target per frame");
        let mut acc = 0.0;
        for (row, &t) in lv.rows().into_iter().zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            acc += lse - row[t];
        }
        let v = ArrayD::from_elem(IxDyn(&[1]), acc / targets.len() as f64);
        let ng = self.needs(logits);
        self.push(
            v,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Backpropagates from a scalar node, returning parameter gradients.
    pub fn backward(&mut self, loss: NodeId) -> GradMap {
        assert_eq!(self.nodes[loss].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            self.dispatch_backward(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }

        let mut out = GradMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = grads[id].take() {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }

    fn accum(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn dispatch_backward(&self, id: NodeId, grad: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accum(grads, *a, grad.clone());
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, grad.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accum(grads, *a, grad.clone());
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, grad.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    Self::accum(grads, *a, grad * &self.nodes[*b].value);
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, grad * &self.nodes[*a].value);
                }
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    Self::accum(grads, *a, grad.mapv(|x| x * k));
                }
            }
            Op::AddScalar(a, _) => {
                if self.needs(*a) {
                    Self::accum(grads, *a, grad.clone());
                }
            }
            Op::AddBiasCols(x, b) => {
                if self.needs(*x) {
                    Self::accum(grads, *x, grad.clone());
                }
                if self.needs(*b) {
                    let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                    Self::accum(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::AddBiasChannels(x, b) => {
                if self.needs(*x) {
                    Self::accum(grads, *x, grad.clone());
                }
                if self.needs(*b) {
                    let g3 = grad.view().into_dimensionality::<Ix3>().unwrap();
                    let c = g3.dim().0;
                    let mut db = ndarray::Array1::zeros(c);
                    for (ci, plane) in g3.outer_iter().enumerate() {
                        db[ci] = plane.sum();
                    }
                    Self::accum(grads, *b, db.into_dyn());
                }
            }
            Op::MatMul(a, b) => {
                let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*a) {
                    let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                    Self::accum(grads, *a, g.dot(&bv.t()).into_dyn());
                }
                if self.needs(*b) {
                    let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                    Self::accum(grads, *b, av.t().dot(&g).into_dyn());
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                    Self::accum(grads, *a, g.t().to_owned().into_dyn());
                }
            }
            Op::Reshape(a, old_shape) => {
                if self.needs(*a) {
                    let g = grad
                        .clone()
                        .into_shape_clone(IxDyn(old_shape))
                        .unwrap();
                    Self::accum(grads, *a, g);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let x = &self.nodes[*a].value;
                    let d = x.mapv(|x| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
                    });
                    Self::accum(grads, *a, grad * &d);
                }
            }
            Op::Silu(a) => {
                if self.needs(*a) {
                    let x = &self.nodes[*a].value;
                    let d = x.mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    Self::accum(grads, *a, grad * &d);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let y = self.nodes[id].value.view().into_dimensionality::<Ix2>().unwrap();
                    let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = g.to_owned();
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                        for (d, y) in drow.iter_mut().zip(yrow.iter()) {
                            *d = (*d - dot) * y;
                        }
                    }
                    Self::accum(grads, *a, dx.into_dyn());
                }
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                let g = self.nodes[*gamma].value.view().into_dimensionality::<Ix1>().unwrap();
                let dy = grad.view().into_dimensionality::<Ix2>().unwrap();
                let (rows, n) = xv.dim();
                let nf = n as f64;

                let mut dx = ndarray::Array2::zeros((rows, n));
                let mut dgamma = ndarray::Array1::zeros(n);
                let mut dbeta = ndarray::Array1::zeros(n);
                for r in 0..rows {
                    let row = xv.row(r);
                    let mean = row.sum() / nf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dyr = dy.row(r);
                    let mut mean_dyg = 0.0;
                    let mut mean_dyg_xhat = 0.0;
                    for j in 0..n {
                        let dyg = dyr[j] * g[j];
                        mean_dyg += dyg;
                        mean_dyg_xhat += dyg * xhat[j];
                        dgamma[j] += dyr[j] * xhat[j];
                        dbeta[j] += dyr[j];
                    }
                    mean_dyg /= nf;
                    mean_dyg_xhat /= nf;
                    for j in 0..n {
                        let dyg = dyr[j] * g[j];
                        dx[[r, j]] = (dyg - mean_dyg - xhat[j] * mean_dyg_xhat) * inv;
                    }
                }
                if self.needs(*x) {
                    Self::accum(grads, *x, dx.into_dyn());
                }
                if self.needs(*gamma) {
                    Self::accum(grads, *gamma, dgamma.into_dyn());
                }
                if self.needs(*beta) {
                    Self::accum(grads, *beta, dbeta.into_dyn());
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let g = self.nodes[*gamma].value.view().into_dimensionality::<Ix1>().unwrap();
                let dy = grad.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = xv.dim();
                let cg = c / groups;
                let m = (cg * h * w) as f64;

                let mut dx = ndarray::Array3::zeros((c, h, w));
                let mut dgamma = ndarray::Array1::zeros(c);
                let mut dbeta = ndarray::Array1::zeros(c);
                for gi in 0..*groups {
                    let c0 = gi * cg;
                    let slice = xv.slice(ndarray::s![c0..c0 + cg, .., ..]);
                    let mean = slice.sum() / m;
                    let var =
                        slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                    let inv = 1.0 / (var + eps).sqrt();

                    let mut mean_dyg = 0.0;
                    let mut mean_dyg_xhat = 0.0;
                    for ci in 0..cg {
                        for i in 0..h {
                            for j in 0..w {
                                let xhat = (xv[[c0 + ci, i, j]] - mean) * inv;
                                let dyv = dy[[c0 + ci, i, j]];
                                let dyg = dyv * g[c0 + ci];
                                mean_dyg += dyg;
                                mean_dyg_xhat += dyg * xhat;
                                dgamma[c0 + ci] += dyv * xhat;
                                dbeta[c0 + ci] += dyv;
                            }
                        }
                    }
                    mean_dyg /= m;
                    mean_dyg_xhat /= m;
                    for ci in 0..cg {
                        for i in 0..h {
                            for j in 0..w {
                                let xhat = (xv[[c0 + ci, i, j]] - mean) * inv;
                                let dyg = dy[[c0 + ci, i, j]] * g[c0 + ci];
                                dx[[c0 + ci, i, j]] =
                                    (dyg - mean_dyg - xhat * mean_dyg_xhat) * inv;
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    Self::accum(grads, *x, dx.into_dyn());
                }
                if self.needs(*gamma) {
                    Self::accum(grads, *gamma, dgamma.into_dyn());
                }
                if self.needs(*beta) {
                    Self::accum(grads, *beta, dbeta.into_dyn());
                }
            }
            Op::Conv1d { x, w, b, pad } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix2>().unwrap();
                let dy = grad.view().into_dimensionality::<Ix2>().unwrap();
                let (c_in, l) = xv.dim();
                let wshape = self.nodes[*w].value.shape().to_vec();
                let (c_out, k) = (wshape[0], wshape[2]);
                let lo = dy.dim().1;

                if self.needs(*w) {
                    let cols = im2col1d(&xv.to_owned(), k, *pad, lo);
                    let dw = dy.dot(&cols.t());
                    Self::accum(
                        grads,
                        *w,
                        dw.into_shape_clone(IxDyn(&[c_out, c_in, k])).unwrap(),
                    );
                }
                if self.needs(*x) {
                    let w_mat = self.nodes[*w]
                        .value
                        .clone()
                        .into_shape_clone(IxDyn(&[c_out, c_in * k]))
                        .unwrap()
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let dcols = w_mat.t().dot(&dy); // (c_in*k, lo)
                    let mut dx = ndarray::Array2::zeros((c_in, l));
                    for ci in 0..c_in {
                        for kk in 0..k {
                            let row = ci * k + kk;
                            for p in 0..lo {
                                let idx = p + kk;
                                if idx >= *pad && idx - pad < l {
                                    dx[[ci, idx - pad]] += dcols[[row, p]];
                                }
                            }
                        }
                    }
                    Self::accum(grads, *x, dx.into_dyn());
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, dy.sum_axis(Axis(1)).into_dyn());
                }
            }
            Op::Conv2d { x, w, b, pad, stride } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                let dy = grad.view().into_dimensionality::<Ix3>().unwrap();
                let (c_in, h, wd) = xv.dim();
                let wshape = self.nodes[*w].value.shape().to_vec();
                let (c_out, k) = (wshape[0], wshape[2]);
                let (_, oh, ow) = dy.dim();
                let dy_mat = dy
                    .to_owned()
                    .into_shape_clone(IxDyn(&[c_out, oh * ow]))
                    .unwrap()
                    .into_dimensionality::<Ix2>()
                    .unwrap();

                if self.needs(*w) {
                    let cols = im2col(&xv.to_owned(), k, *pad, *stride, oh, ow);
                    let dw = dy_mat.dot(&cols.t()); // (c_out, c_in*k*k)
                    Self::accum(
                        grads,
                        *w,
                        dw.into_shape_clone(IxDyn(&[c_out, c_in, k, k])).unwrap(),
                    );
                }
                if self.needs(*x) {
                    let w_mat = self.nodes[*w]
                        .value
                        .clone()
                        .into_shape_clone(IxDyn(&[c_out, c_in * k * k]))
                        .unwrap()
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let dcols = w_mat.t().dot(&dy_mat); // (c_in*k*k, oh*ow)
                    let dx = col2im(&dcols, c_in, h, wd, k, *pad, *stride, oh, ow);
                    Self::accum(grads, *x, dx.into_dyn());
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, dy_mat.sum_axis(Axis(1)).into_dyn());
                }
            }
            Op::Upsample2x(x) => {
                if self.needs(*x) {
                    let dy = grad.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, h2, w2) = dy.dim();
                    let mut dx = ndarray::Array3::zeros((c, h2 / 2, w2 / 2));
                    for ci in 0..c {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                dx[[ci, i / 2, j / 2]] += dy[[ci, i, j]];
                            }
                        }
                    }
                    Self::accum(grads, *x, dx.into_dyn());
                }
            }
            Op::CropHw(x) => {
                if self.needs(*x) {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let dy = grad.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, hc, wc) = dy.dim();
                    let mut dx = ndarray::Array3::zeros((shape[0], shape[1], shape[2]));
                    for ci in 0..c {
                        for i in 0..hc {
                            for j in 0..wc {
                                dx[[ci, i, j]] = dy[[ci, i, j]];
                            }
                        }
                    }
                    Self::accum(grads, *x, dx.into_dyn());
                }
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.nodes[*a].value.shape()[0];
                let dy = grad.view().into_dimensionality::<Ix3>().unwrap();
                if self.needs(*a) {
                    Self::accum(
                        grads,
                        *a,
                        dy.slice(ndarray::s![..ca, .., ..]).to_owned().into_dyn(),
                    );
                }
                if self.needs(*b) {
                    Self::accum(
                        grads,
                        *b,
                        dy.slice(ndarray::s![ca.., .., ..]).to_owned().into_dyn(),
                    );
                }
            }
            Op::NarrowCols { x, start } => {
                if self.needs(*x) {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    let dy = grad.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = ndarray::Array2::zeros((shape[0], shape[1]));
                    dx.slice_mut(ndarray::s![.., *start..start + dy.ncols()])
                        .assign(&dy);
                    Self::accum(grads, *x, dx.into_dyn());
                }
            }
            Op::ConcatCols(a, b) => {
                let na = self.nodes[*a].value.shape()[1];
                let dy = grad.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*a) {
                    Self::accum(
                        grads,
                        *a,
                        dy.slice(ndarray::s![.., ..na]).to_owned().into_dyn(),
                    );
                }
                if self.needs(*b) {
                    Self::accum(
                        grads,
                        *b,
                        dy.slice(ndarray::s![.., na..]).to_owned().into_dyn(),
                    );
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let g = grad[[0]];
                    let shape = self.nodes[*a].value.shape().to_vec();
                    Self::accum(grads, *a, ArrayD::from_elem(IxDyn(&shape), g));
                }
            }
            Op::CrossEntropyMean { logits, targets } => {
                if self.needs(*logits) {
                    let g = grad[[0]];
                    let lv = self.nodes[*logits]
                        .value
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let scale = g / targets.len() as f64;
                    let mut dx = lv.to_owned();
                    for (mut row, &t) in dx.rows_mut().into_iter().zip(targets) {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        row.mapv_inplace(|x| (x - max).exp());
                        let sum = row.sum();
                        row.mapv_inplace(|x| x / sum * scale);
                        row[t] -= scale;
                    }
                    Self::accum(grads, *logits, dx.into_dyn());
                }
            }
        }
    }
}

fn im2col1d(x: &ndarray::Array2<f64>, k: usize, pad: usize, lo: usize) -> ndarray::Array2<f64> {
    let (c_in, l) = x.dim();
    let mut cols = ndarray::Array2::zeros((c_in * k, lo));
    for ci in 0..c_in {
        for kk in 0..k {
            let row = ci * k + kk;
            for p in 0..lo {
                let idx = p + kk;
                if idx >= pad && idx - pad < l {
                    cols[[row, p]] = x[[ci, idx - pad]];
                }
            }
        }
    }
    cols
}

fn im2col(
    x: &ndarray::Array3<f64>,
    k: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array2<f64> {
    let (c_in, h, w) = x.dim();
    let mut cols = ndarray::Array2::zeros((c_in * k * k, oh * ow));
    for ci in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                for oi in 0..oh {
                    let i = oi * stride + ki;
                    if i < pad || i - pad >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let j = oj * stride + kj;
                        if j < pad || j - pad >= w {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = x[[ci, i - pad, j - pad]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &ndarray::Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f64> {
    let mut dx = ndarray::Array3::zeros((c_in, h, w));
    for ci in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                for oi in 0..oh {
                    let i = oi * stride + ki;
                    if i < pad || i - pad >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let j = oj * stride + kj;
                        if j < pad || j - pad >= w {
                            continue;
                        }
                        dx[[ci, i - pad, j - pad]] += dcols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Central-difference check of d(loss)/d(param "p") for a graph builder.
    fn check_grad<F>(build: F, p0: ArrayD<f64>, tol: f64)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut tape = Tape::new();
        let p = tape.param("p", p0.clone());
        let loss = build(&mut tape, p);
        let grads = tape.backward(loss);
        let analytic = &grads["p"];

        let h = 1e-5;
        for idx in 0..p0.len().min(12) {
            let mut plus = p0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = p0.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let f = |pv: ArrayD<f64>| {
                let mut t = Tape::new();
                let p = t.param("p", pv);
                let l = build(&mut t, p);
                t.scalar(l)
            };
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (an - fd).abs() / denom < tol,
                "idx {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_grad() {
        let c = randn(&[3, 2], 1);
        check_grad(
            move |t, p| {
                let cn = t.constant(c.clone());
                let y = t.matmul(p, cn);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            randn(&[4, 3], 2),
            1e-6,
        );
    }

    #[test]
    fn activation_grads() {
        check_grad(
            |t, p| {
                let g = t.gelu(p);
                let s = t.silu(g);
                let sq = t.mul(s, s);
                t.mean_all(sq)
            },
            randn(&[5, 4], 3),
            1e-6,
        );
    }

    #[test]
    fn softmax_and_ce_grads() {
        check_grad(
            |t, p| {
                let sm = t.softmax_rows(p);
                let sq = t.mul(sm, sm);
                t.mean_all(sq)
            },
            randn(&[3, 5], 4),
            1e-6,
        );
        check_grad(
            |t, p| t.cross_entropy_mean(p, &[0, 2, 1]),
            randn(&[3, 4], 5),
            1e-6,
        );
    }

    #[test]
    fn layer_norm_grad() {
        let gamma = randn(&[6], 6);
        let beta = randn(&[6], 7);
        check_grad(
            move |t, p| {
                let g = t.param("g", gamma.clone());
                let b = t.param("b", beta.clone());
                let y = t.layer_norm_rows(p, g, b, 1e-5);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            randn(&[4, 6], 8),
            1e-5,
        );
    }

    #[test]
    fn group_norm_grad() {
        let gamma = randn(&[4], 9);
        let beta = randn(&[4], 10);
        check_grad(
            move |t, p| {
                let g = t.param("g", gamma.clone());
                let b = t.param("b", beta.clone());
                let y = t.group_norm(p, g, b, 2, 1e-5);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            randn(&[4, 3, 2], 11),
            1e-5,
        );
    }

    #[test]
    fn conv1d_grad() {
        let x = randn(&[3, 7], 12);
        let b = randn(&[2], 13);
        check_grad(
            move |t, p| {
                let xn = t.param("x", x.clone());
                let bn = t.param("b2", b.clone());
                let y = t.conv1d(xn, p, bn, 2);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            randn(&[2, 3, 5], 14),
            1e-6,
        );
    }

    #[test]
    fn conv2d_grad_stride1_and_2() {
        for stride in [1usize, 2] {
            let x = randn(&[2, 6, 6], 15);
            let b = randn(&[3], 16);
            check_grad(
                move |t, p| {
                    let xn = t.param("x", x.clone());
                    let bn = t.param("b2", b.clone());
                    let y = t.conv2d(xn, p, bn, 1, stride);
                    let sq = t.mul(y, y);
                    t.mean_all(sq)
                },
                randn(&[3, 2, 3, 3], 17),
                1e-6,
            );
        }
    }

    #[test]
    fn conv2d_input_grad() {
        let w = randn(&[3, 2, 3, 3], 18);
        let b = randn(&[3], 19);
        check_grad(
            move |t, p| {
                let wn = t.param("w", w.clone());
                let bn = t.param("b2", b.clone());
                let y = t.conv2d(p, wn, bn, 1, 1);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            randn(&[2, 5, 4], 20),
            1e-6,
        );
    }

    #[test]
    fn structural_op_grads() {
        check_grad(
            |t, p| {
                let up = t.upsample2x(p);
                let crop = t.crop_hw(up, 5, 3);
                let sq = t.mul(crop, crop);
                t.mean_all(sq)
            },
            randn(&[2, 3, 2], 21),
            1e-6,
        );
        check_grad(
            |t, p| {
                let a = t.narrow_cols(p, 1, 2);
                let b = t.narrow_cols(p, 0, 3);
                let tb = t.transpose(b);
                let y = t.matmul(tb, a);
                let sm = t.softmax_rows(y);
                let sq = t.mul(sm, sm);
                t.mean_all(sq)
            },
            randn(&[4, 4], 22),
            1e-6,
        );
    }

    #[test]
    fn conv2d_stride2_is_ceil_mode() {
        let mut t = Tape::new();
        let x = t.constant(randn(&[1, 5, 7], 23));
        let w = t.constant(randn(&[1, 1, 3, 3], 24));
        let b = t.constant(randn(&[1], 25));
        let y = t.conv2d(x, w, b, 1, 2);
        assert_eq!(t.shape(y), &[1, 3, 4]); // ceil(5/2), ceil(7/2)
    }

    #[test]
    fn constants_do_not_collect_grads() {
        let mut t = Tape::new();
        let c = t.constant(randn(&[2, 2], 26));
        let p = t.param("p", randn(&[2, 2], 27));
        let y = t.mul(c, p);
        let l = t.mean_all(y);
        let grads = t.backward(l);
        assert!(grads.contains_key("p"));
        assert_eq!(grads.len(), 1);
    }
}
