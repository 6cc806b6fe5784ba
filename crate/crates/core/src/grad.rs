//! Reverse-mode gradient tape.
//!
//! Every forward computation is recorded on a [`Tape`] as a linear list of
//! nodes. Nodes are appended in evaluation order, so walking the list
//! backwards is a valid reverse topological order. [`Tape::backward`]
//! accumulates vector-Jacobian products into a [`Gradients`] table.
//!
//! The spike nonlinearity is recorded with a [`SurrogateSpec`]: its forward
//! pass is the Heaviside step, its backward pass uses the surrogate
//! derivative instead of the (almost everywhere zero) true one.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{self, Tensor};
use crate::window;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Rectangular,
    Triangular,
}

/// Stand-in derivative of the spike step, centred on the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub width: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::Rectangular,
            width: 1.0,
        }
    }
}

impl SurrogateSpec {
    pub fn rectangular(width: f64) -> Self {
        Self {
            kind: SurrogateKind::Rectangular,
            width,
        }
    }

    pub fn triangular(width: f64) -> Self {
        Self {
            kind: SurrogateKind::Triangular,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Config(format!(
                "surrogate width must be positive, got {}",
                self.width
            )));
        }
        Ok(())
    }

    /// Surrogate derivative of `step(v - delta)`. Both shapes integrate to 1.
    pub fn derivative(&self, v: f64, delta: f64) -> f64 {
        let d = (v - delta).abs();
        let a = self.width;
        match self.kind {
            SurrogateKind::Rectangular => {
                if d <= a / 2.0 {
                    1.0 / a
                } else {
                    0.0
                }
            }
            SurrogateKind::Triangular => ((1.0 - d / a) / a).max(0.0),
        }
    }
}

/// Heaviside spike: 1 where `v > delta`, else 0.
pub fn spike_forward(v: &Tensor, delta: f64) -> Tensor {
    v.map(|x| if x > delta { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    Reshape(Var),
    Spike {
        v: Var,
        threshold: Option<Var>,
        delta: f64,
        surrogate: SurrogateSpec,
    },
    Omega {
        m1: Var,
        m2: Var,
        theta: f64,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    Tile {
        parts: Vec<Var>,
        cols: usize,
    },
    Condense([Var; 4]),
    RegionThreshold(Var),
    ResampleNearest(Var),
    MeanSpatial(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v`'s value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn zeros_like(&mut self, v: Var) -> Var {
        let z = Tensor::zeros(self.shape(v));
        self.constant(z)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        self.push(out, Op::Scale(a, k), &[a])
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return dim_err(format!(
                "scale_by expects a scalar, got {:?}",
                self.shape(s)
            ));
        }
        let k = self.value(s).data()[0];
        let out = self.value(a).map(|x| k * x);
        Ok(self.push(out, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = tensor::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        ))
    }

    /// `x[b, c, ..] + bias[c]` for a rank-4 `x`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if self.value(bias).len() != c {
            return dim_err(format!(
                "bias has {} entries for {c} channels",
                self.value(bias).len()
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[(i / (h * w)) % c];
        }
        Ok(self.push(out, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    /// `x[r, k] + bias[k]` for a rank-2 `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, k) = self.value(x).dims2()?;
        if self.value(bias).len() != k {
            return dim_err(format!(
                "bias has {} entries for {k} columns",
                self.value(bias).len()
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[i % k];
        }
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Spike step with a fixed threshold `delta`.
    pub fn spike(&mut self, v: Var, delta: f64, surrogate: SurrogateSpec) -> Result<Var> {
        if delta.is_nan() || delta <= 0.0 {
            return Err(Error::Config(format!(
                "firing threshold must be positive, got {delta}"
            )));
        }
        surrogate.validate()?;
        let out = spike_forward(self.value(v), delta);
        Ok(self.push(
            out,
            Op::Spike {
                v,
                threshold: None,
                delta,
                surrogate,
            },
            &[v],
        ))
    }

    /// Spike step whose threshold is the single-element node `threshold`
    /// (trainable firing threshold).
    pub fn spike_with_threshold(
        &mut self,
        v: Var,
        threshold: Var,
        surrogate: SurrogateSpec,
    ) -> Result<Var> {
        if self.value(threshold).len() != 1 {
            return dim_err("threshold must be a single value");
        }
        let delta = self.value(threshold).data()[0];
        surrogate.validate()?;
        let out = spike_forward(self.value(v), delta);
        Ok(self.push(
            out,
            Op::Spike {
                v,
                threshold: Some(threshold),
                delta,
                surrogate,
            },
            &[v, threshold],
        ))
    }

    /// Projection fusion `2 sin(θπ/2 · m1) cos(θπ/2 · m2)`.
    pub fn omega(&mut self, m1: Var, m2: Var, theta: f64) -> Result<Var> {
        let out = crate::fusion::omega_tensor(self.value(m1), self.value(m2), theta)?;
        Ok(self.push(out, Op::Omega { m1, m2, theta }, &[m1, m2]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let out = self.value(x).crop(y0, x0, h, w)?;
        Ok(self.push(out, Op::Crop { x, y0, x0 }, &[x]))
    }

    /// Places equally sized windows on a `rows × cols` grid in raster order.
    pub fn tile(&mut self, parts: &[Var], rows: usize, cols: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = window::tile_windows(&values, rows, cols)?;
        Ok(self.push(
            out,
            Op::Tile {
                parts: parts.to_vec(),
                cols,
            },
            parts,
        ))
    }

    /// Weighted condense of four dilated windows back to the full map.
    pub fn condense(&mut self, parts: [Var; 4]) -> Result<Var> {
        let out = window::condense_windows([
            self.value(parts[0]),
            self.value(parts[1]),
            self.value(parts[2]),
            self.value(parts[3]),
        ])?;
        Ok(self.push(out, Op::Condense(parts), &parts))
    }

    /// Promotes every value above `threshold` to 1. The backward pass is
    /// the identity (straight-through).
    pub fn region_threshold(&mut self, x: Var, threshold: f64) -> Var {
        let out = self.value(x).map(|v| if v > threshold { 1.0 } else { v });
        self.push(out, Op::RegionThreshold(x), &[x])
    }

    /// Nearest-neighbour resampling of a rank-4 map to `(c, h, w)`.
    pub fn resample_nearest(&mut self, x: Var, c: usize, h: usize, w: usize) -> Result<Var> {
        let out = resample_nearest(self.value(x), c, h, w)?;
        Ok(self.push(out, Op::ResampleNearest(x), &[x]))
    }

    /// Spatial mean: `(b, c, h, w) -> (b, c)`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let out = Tensor::new(vec![b, c], data)?;
        Ok(self.push(out, Op::MeanSpatial(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Mean softmax cross-entropy of `(b, k)` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if labels.len() != b {
            return dim_err(format!("{} labels for batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut loss = 0.0;
        for (row, &y) in self.value(logits).data().chunks(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let out = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Backpropagates from `out`, seeding with ones.
    pub fn backward(&self, out: Var) -> Gradients {
        let seed = Tensor::full(self.shape(out), 1.0);
        self.backward_with(out, seed)
    }

    pub fn backward_with(&self, out: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &g, idx, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, g: &Tensor, idx: usize, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(vb, |x, y| x * y).expect("shape"));
                acc(*b, g.zip_map(va, |x, y| x * y).expect("shape"));
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| k * x)),
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).data()[0];
                acc(*a, g.map(|x| k * x));
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(x, y)| x * y)
                    .sum();
                acc(*s, Tensor::scalar(ds));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let vbt = tensor::transpose2(vb).expect("rank 2");
                let vat = tensor::transpose2(va).expect("rank 2");
                acc(*a, tensor::matmul(g, &vbt).expect("shape"));
                acc(*b, tensor::matmul(&vat, g).expect("shape"));
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (dx, dk) = tensor::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                )
                .expect("shape");
                acc(*input, dx);
                acc(*kernel, dk);
            }
            Op::AddChannelBias(x, b) => {
                let (_, c, h, w) = g.dims4().expect("rank 4");
                let mut db = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    db[(i / (h * w)) % c] += v;
                }
                acc(*x, g.clone());
                acc(*b, Tensor::new(self.shape(*b).to_vec(), db).expect("shape"));
            }
            Op::AddRowBias(x, b) => {
                let (_, k) = g.dims2().expect("rank 2");
                let mut db = vec![0.0; k];
                for (i, v) in g.data().iter().enumerate() {
                    db[i % k] += v;
                }
                acc(*x, g.clone());
                acc(*b, Tensor::new(self.shape(*b).to_vec(), db).expect("shape"));
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.shape(*x)).expect("shape")),
            Op::Spike {
                v,
                threshold,
                delta,
                surrogate,
            } => {
                let dv = g
                    .zip_map(self.value(*v), |gi, vi| {
                        gi * surrogate.derivative(vi, *delta)
                    })
                    .expect("shape");
                if let Some(t) = threshold {
                    acc(*t, Tensor::scalar(-dv.sum()));
                }
                acc(*v, dv);
            }
            Op::Omega { m1, m2, theta } => {
                let a = theta * PI / 2.0;
                let (x, y) = (self.value(*m1).data(), self.value(*m2).data());
                let mut d1 = Vec::with_capacity(g.len());
                let mut d2 = Vec::with_capacity(g.len());
                for ((gi, xi), yi) in g.data().iter().zip(x).zip(y) {
                    let (sx, cx) = (a * xi).sin_cos();
                    let (sy, cy) = (a * yi).sin_cos();
                    d1.push(gi * theta * PI * cx * cy);
                    d2.push(-gi * theta * PI * sx * sy);
                }
                let shape = g.shape().to_vec();
                acc(*m1, Tensor::new(shape.clone(), d1).expect("shape"));
                acc(*m2, Tensor::new(shape, d2).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                acc(*x, g.zip_map(y, |gi, s| gi * s * (1.0 - s)).expect("shape"));
            }
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                acc(*x, g.zip_map(y, |gi, t| gi * (1.0 - t * t)).expect("shape"));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(
                    *x,
                    g.zip_map(xv, |gi, v| if v > 0.0 { gi } else { 0.0 })
                        .expect("shape"),
                );
            }
            Op::Crop { x, y0, x0 } => {
                let mut full = Tensor::zeros(self.shape(*x));
                window::scatter_add_window(&mut full, g, *y0, *x0).expect("shape");
                acc(*x, full);
            }
            Op::Tile { parts, cols } => {
                let (_, _, h, w) = self.value(parts[0]).dims4().expect("rank 4");
                for (i, p) in parts.iter().enumerate() {
                    let (r, c) = (i / cols, i % cols);
                    acc(*p, g.crop(r * h, c * w, h, w).expect("shape"));
                }
            }
            Op::Condense(parts) => {
                for (p, gw) in parts
                    .iter()
                    .zip(window::condense_adjoint(g).expect("shape"))
                {
                    acc(*p, gw);
                }
            }
            Op::RegionThreshold(x) => acc(*x, g.clone()),
            Op::ResampleNearest(x) => {
                let mut full = Tensor::zeros(self.shape(*x));
                resample_nearest_adjoint(&mut full, g).expect("shape");
                acc(*x, full);
            }
            Op::MeanSpatial(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("rank 4");
                let hw = (h * w) as f64;
                let mut d = Vec::with_capacity(self.value(*x).len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv / hw, h * w));
                }
                acc(*x, Tensor::new(self.shape(*x).to_vec(), d).expect("shape"));
            }
            Op::Sum(x) => {
                let k = g.data()[0];
                acc(*x, Tensor::full(self.shape(*x), k));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let (b, k) = self.value(*logits).dims2().expect("rank 2");
                let scale = g.data()[0] / b as f64;
                let mut d = Vec::with_capacity(b * k);
                for (row, &y) in self.value(*logits).data().chunks(k).zip(labels) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for (j, v) in row.iter().enumerate() {
                        let p = (v - m).exp() / z;
                        d.push(scale * (p - if j == y { 1.0 } else { 0.0 }));
                    }
                }
                acc(*logits, Tensor::new(vec![b, k], d).expect("shape"));
            }
        }
    }
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn nearest(dst: usize, dst_len: usize, src_len: usize) -> usize {
    dst * src_len / dst_len
}

pub fn resample_nearest(x: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let (b, sc, sh, sw) = x.dims4()?;
    if c == 0 || h == 0 || w == 0 {
        return dim_err("resample target must be non-empty");
    }
    if (sc, sh, sw) == (c, h, w) {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            let cs = nearest(ci, c, sc);
            for y in 0..h {
                let ys = nearest(y, h, sh);
                for xx in 0..w {
                    out.push(x.at4(bi, cs, ys, nearest(xx, w, sw)));
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

fn resample_nearest_adjoint(full: &mut Tensor, g: &Tensor) -> Result<()> {
    let (b, sc, sh, sw) = full.dims4()?;
    let (_, c, h, w) = g.dims4()?;
    let gd = g.data();
    let fd = full.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let cs = nearest(ci, c, sc);
            for y in 0..h {
                let ys = nearest(y, h, sh);
                for xx in 0..w {
                    let xs = nearest(xx, w, sw);
                    fd[((bi * sc + cs) * sh + ys) * sw + xs] +=
                        gd[((bi * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    Ok(())
}
