use super::kernels::{col2im_add, gemm, im2col, ConvGeom, Strides};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Negative-side slope of [`Tape::leaky_relu`].
pub const LEAKY_SLOPE: f32 = 0.2;

const BN_EPS: f32 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op selector for [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    Add,
    Sub,
    Mul,
    Relu,
    LeakyRelu,
    Tanh,
    MaxPool2d { kernel: usize },
    Reshape(Vec<usize>),
    Softmax,
    Log,
    Mean,
    Sum,
}

/// Per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    LeakyRelu(Var),
    Tanh(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
    },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    ClampMin(Var, f32),
    Mean(Var),
    Sum(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records ops in execution order and replays them backwards.
///
/// Nodes are appended only after their inputs exist, so the node list is
/// always a topological order. Parameters are copied in as leaves; the owning
/// network keeps the originals and reads gradients back through [`Tape::grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
}

/// Output shape of a broadcasting binary op plus, for each output axis, the
/// stride to use in each operand (0 on broadcast axes).
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (i, (&x, &y)) in pa.iter().zip(&pb).enumerate() {
        let d = match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => {
                return Err(shape_err(
                    op,
                    format!("axis {i}: {x} vs {y} (shapes {a:?} and {b:?})"),
                ))
            }
        };
        out.push(d);
    }
    let strides = |p: &[usize]| {
        let mut s = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            s[i] = if p[i] == 1 && out[i] != 1 { 0 } else { acc };
            acc *= p[i];
        }
        s
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    Ok((out, sa, sb))
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < total {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o + j, ia + j * ia_step, ib + j * ib_step);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Splits a shape into (outer, axis, inner) extents around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles from before the call are invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    /// `None` when `v` does not require a gradient or did not influence the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    /// If `v` was produced by [`Tape::softmax`], the logits it was computed from.
    pub fn softmax_input(&self, v: Var) -> Option<Var> {
        match self.nodes[v.0].op {
            Op::Softmax(x) => Some(x),
            _ => None,
        }
    }

    /// Generic entry point; each kind also has a dedicated method.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul
            | OpKind::Conv2d { .. }
            | OpKind::ConvTranspose2d { .. }
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        let a = inputs[0];
        let b = inputs.get(1).copied().unwrap_or(a);
        match kind {
            OpKind::MatMul => self.matmul(a, b),
            OpKind::Conv2d { stride, pad } => self.conv2d(a, b, *stride, *pad),
            OpKind::ConvTranspose2d { stride, pad } => self.conv_transpose2d(a, b, *stride, *pad),
            OpKind::Add => self.add(a, b),
            OpKind::Sub => self.sub(a, b),
            OpKind::Mul => self.mul(a, b),
            OpKind::Relu => Ok(self.relu(a)),
            OpKind::LeakyRelu => Ok(self.leaky_relu(a)),
            OpKind::Tanh => Ok(self.tanh(a)),
            OpKind::MaxPool2d { kernel } => self.max_pool2d(a, *kernel),
            OpKind::Reshape(shape) => self.reshape(a, shape),
            OpKind::Softmax => self.softmax(a),
            OpKind::Log => self.log(a),
            OpKind::Mean => Ok(self.mean(a)),
            OpKind::Sum => Ok(self.sum(a)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Strides::rm(k),
            self.value(b).data(),
            Strides::rm(n),
            &mut out,
            Strides::rm(n),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// NCHW convolution with a square `(out, in, k, k)` kernel and no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err(
                "conv2d",
                format!("input {sx:?}, weight {sw:?} (want (N,C,H,W) and (O,C,k,k))"),
            ));
        }
        let (n, o, k) = (sx[0], sw[0], sw[2]);
        let g = ConvGeom::new(sx[1], sx[2], sx[3], k, stride, pad)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {k} does not fit input {sx:?} with pad {pad}")))?;
        let (ck, p) = (g.col_rows(), g.col_cols());
        let mut out = vec![0.0; n * o * p];
        let mut cols = vec![0.0; ck * p];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for s in 0..n {
            im2col(&xd[s * g.image_len()..(s + 1) * g.image_len()], &g, &mut cols);
            gemm(
                o,
                ck,
                p,
                wd,
                Strides::rm(ck),
                &cols,
                Strides::rm(p),
                &mut out[s * o * p..(s + 1) * o * p],
                Strides::rm(p),
                false,
            );
        }
        let rg = self.rg(x) || self.rg(w);
        let value = Tensor {
            shape: vec![n, o, g.out_h, g.out_w],
            data: out,
        };
        Ok(self.push(value, Op::Conv2d { x, w, stride, pad }, rg))
    }

    /// Transposed NCHW convolution with an `(in, out, k, k)` kernel and no bias.
    /// Output side is `(in_side − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(shape_err(
                "conv_transpose2d",
                format!("input {sx:?}, weight {sw:?} (want (N,C,H,W) and (C,O,k,k))"),
            ));
        }
        let g = transposed_geom(&sx, &sw, stride, pad)?;
        let (n, cin, pin) = (sx[0], sx[1], sx[2] * sx[3]);
        let rows = g.col_rows();
        let mut out = vec![0.0; n * g.image_len()];
        let mut cols = vec![0.0; rows * pin];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for s in 0..n {
            gemm(
                rows,
                cin,
                pin,
                wd,
                Strides::rm_t(rows),
                &xd[s * cin * pin..(s + 1) * cin * pin],
                Strides::rm(pin),
                &mut cols,
                Strides::rm(pin),
                false,
            );
            col2im_add(&cols, &g, &mut out[s * g.image_len()..(s + 1) * g.image_len()]);
        }
        let rg = self.rg(x) || self.rg(w);
        let value = Tensor {
            shape: vec![n, g.channels, g.height, g.width],
            data: out,
        };
        Ok(self.push(value, Op::ConvTranspose2d { x, w, stride, pad }, rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, make: fn(Var, Var) -> Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (shape, sa, sb) = broadcast(op, va.shape(), vb.shape())?;
            let mut out = vec![0.0; shape.iter().product()];
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast(&shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
            let rg = self.rg(a) || self.rg(b);
            return Ok(self.push(Tensor { shape, data: out }, make(a, b), rg));
        };
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, make(a, b), rg))
    }

    /// Elementwise sum, broadcasting size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&t| f(t)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        self.unary(x, |t| t * factor, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |t| t.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(x, |t| if t > 0.0 { t } else { LEAKY_SLOPE * t }, Op::LeakyRelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f32) -> Var {
        self.unary(x, |t| t.max(floor), Op::ClampMin(x, floor))
    }

    /// Natural log. Fails on any non-positive entry.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self.value(x).data().iter().enumerate().find(|(_, &v)| v <= 0.0 || v.is_nan()) {
            return Err(Error::LogDomain { index, value });
        }
        Ok(self.unary(x, f32::ln, Op::Log(x)))
    }

    /// Non-overlapping `kernel × kernel` max pooling (stride = kernel, floor
    /// on ragged edges). Ties pick the lowest flat index in the window.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || kernel == 0 || sx[2] < kernel || sx[3] < kernel {
            return Err(shape_err("max_pool2d", format!("input {sx:?}, kernel {kernel}")));
        }
        let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / kernel, w / kernel);
        let xd = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        let mut argmax = vec![0u32; planes * oh * ow];
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * kernel * w + ox * kernel;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * kernel + ky) * w + ox * kernel + kx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    let o = (pl * oh + oy) * ow + ox;
                    out[o] = xd[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor {
            shape: vec![sx[0], sx[1], oh, ow],
            data: out,
        };
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn last_axis(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&c) if c > 0 => Ok(c),
            _ => Err(shape_err(op, format!("needs a non-empty last axis, got {:?}", self.shape(x)))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.last_axis("softmax", x)?;
        let v = self.value(x);
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for t in row.iter_mut() {
                *t = (*t - max).exp();
                sum += *t;
            }
            for t in row.iter_mut() {
                *t /= sum;
            }
        }
        let value = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Log-softmax over the last axis, computed stably from logits.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.last_axis("log_softmax", x)?;
        let v = self.value(x);
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&t| (t - max).exp()).sum::<f32>().ln() + max;
            for t in row.iter_mut() {
                *t -= lse;
            }
        }
        let value = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// Mean of all entries, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.len().max(1) as f64;
        let m = v.data().iter().map(|&t| t as f64).sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m as f32), Op::Mean(x), rg)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&t| t as f64).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = around(&shape, axis);
        let xd = self.value(x).data();
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (i, &t) in row.iter().enumerate() {
                    acc[o * inner + i] += t as f64;
                }
            }
        }
        let data = acc.into_iter().map(|s| (s / len as f64) as f32).collect();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::MeanAxis { x, axis }, rg))
    }

    /// Batch normalization over every axis except axis 1 (channels).
    ///
    /// With `stats == None` the batch's own statistics are used and returned;
    /// otherwise the given statistics are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<&BatchNormStats>,
    ) -> Result<(Var, BatchNormStats)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("batch_norm", format!("input {shape:?} has no channel axis")));
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!("{c} channels but gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (outer, _, inner) = around(&shape, 1);
        let count = outer * inner;
        if count == 0 {
            return Err(shape_err("batch_norm", "empty batch"));
        }
        let batch_stats = stats.is_none();
        let xd = self.value(x).data();
        let stats = match stats {
            Some(s) if s.mean.len() == c && s.var.len() == c => s.clone(),
            Some(_) => return Err(shape_err("batch_norm", "statistics do not match channel count")),
            None => {
                let mut mean = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let row = &xd[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        for &t in row {
                            mean[ch] += t as f64;
                        }
                    }
                }
                for m in &mut mean {
                    *m /= count as f64;
                }
                for o in 0..outer {
                    for ch in 0..c {
                        let row = &xd[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        for &t in row {
                            sq[ch] += (t as f64 - mean[ch]).powi(2);
                        }
                    }
                }
                BatchNormStats {
                    mean: mean.iter().map(|&m| m as f32).collect(),
                    var: sq.iter().map(|&s| (s / count as f64) as f32).collect(),
                }
            }
        };
        let inv_std: Vec<f32> = stats.var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - stats.mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor { shape, data: out };
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }
}

fn transposed_geom(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let k = sw[2];
    let side = |n: usize| ((n - 1) * stride + k).checked_sub(2 * pad);
    let (oh, ow) = match (side(sx[2].max(1)), side(sx[3].max(1))) {
        (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(shape_err(
                "conv_transpose2d",
                format!("padding {pad} too large for input {sx:?} and kernel {k}"),
            ))
        }
    };
    let g = ConvGeom::new(sw[1], oh, ow, k, stride, pad)
        .ok_or_else(|| shape_err("conv_transpose2d", "degenerate geometry"))?;
    if g.out_h != sx[2] || g.out_w != sx[3] {
        return Err(shape_err("conv_transpose2d", format!("geometry mismatch for input {sx:?}")));
    }
    Ok(g)
}

type Grads = [Option<Vec<f32>>];

/// Gradient buffer of `v`, created zeroed on first use; `None` when `v` does
/// not take gradients.
fn slot<'a>(nodes: &[Node], grads: &'a mut Grads, v: Var) -> Option<&'a mut Vec<f32>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn accumulate(nodes: &[Node], grads: &mut Grads, v: Var, contrib: Vec<f32>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(buf) => {
            for (a, b) in buf.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        empty @ None => *empty = Some(contrib),
    }
}

/// Sums an output-shaped gradient back down to an operand's (broadcast) shape.
fn reduce_broadcast(
    nodes: &[Node],
    grads: &mut Grads,
    out_shape: &[usize],
    a: Var,
    b: Var,
    g: &[f32],
    fa: impl Fn(usize, usize, usize) -> f32,
    fb: impl Fn(usize, usize, usize) -> f32,
) {
    let (sa_shape, sb_shape) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
    let (_, sa, sb) = broadcast("backward", sa_shape, sb_shape).expect("shapes were checked in forward");
    let mut ga = nodes[a.0].requires_grad.then(|| vec![0.0; nodes[a.0].value.len()]);
    let mut gb = nodes[b.0].requires_grad.then(|| vec![0.0; nodes[b.0].value.len()]);
    for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
        if let Some(ga) = ga.as_mut() {
            ga[i] += g[o] * fa(o, i, j);
        }
        if let Some(gb) = gb.as_mut() {
            gb[j] += g[o] * fb(o, i, j);
        }
    });
    if let Some(ga) = ga {
        accumulate(nodes, grads, a, ga);
    }
    if let Some(gb) = gb {
        accumulate(nodes, grads, b, gb);
    }
}

fn map_grad(g: &[f32], x: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect()
}

/// Pushes the gradient `g` of node `i` to that node's inputs.
fn backprop(nodes: &[Node], grads: &mut Grads, i: usize, g: &[f32]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(da) = slot(nodes, grads, a) {
                gemm(m, n, k, g, Strides::rm(n), val(b), Strides::rm_t(n), da, Strides::rm(k), true);
            }
            if let Some(db) = slot(nodes, grads, b) {
                gemm(k, m, n, val(a), Strides::rm_t(k), g, Strides::rm(n), db, Strides::rm(n), true);
            }
        }
        &Op::Conv2d { x, w, stride, pad } => {
            let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
            let (n, o, k) = (sx[0], sw[0], sw[2]);
            let geom = ConvGeom::new(sx[1], sx[2], sx[3], k, stride, pad).expect("checked in forward");
            let (ck, p, il) = (geom.col_rows(), geom.col_cols(), geom.image_len());
            let (xd, wd) = (val(x), val(w));
            let mut cols = vec![0.0; ck * p];
            if nodes[w.0].requires_grad {
                let dw = slot(nodes, grads, w).expect("requires grad");
                for s in 0..n {
                    im2col(&xd[s * il..(s + 1) * il], &geom, &mut cols);
                    gemm(o, p, ck, &g[s * o * p..(s + 1) * o * p], Strides::rm(p), &cols, Strides::rm_t(p), dw, Strides::rm(ck), true);
                }
            }
            if let Some(dx) = slot(nodes, grads, x) {
                for s in 0..n {
                    gemm(ck, o, p, wd, Strides::rm_t(ck), &g[s * o * p..(s + 1) * o * p], Strides::rm(p), &mut cols, Strides::rm(p), false);
                    col2im_add(&cols, &geom, &mut dx[s * il..(s + 1) * il]);
                }
            }
        }
        &Op::ConvTranspose2d { x, w, stride, pad } => {
            let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
            let geom = transposed_geom(sx, sw, stride, pad).expect("checked in forward");
            let (n, cin, pin) = (sx[0], sx[1], sx[2] * sx[3]);
            let (rows, ol) = (geom.col_rows(), geom.image_len());
            let (xd, wd) = (val(x), val(w));
            let mut gcols = vec![0.0; rows * pin];
            let x_rg = nodes[x.0].requires_grad;
            let w_rg = nodes[w.0].requires_grad;
            let mut dw = w_rg.then(|| grads[w.0].take().unwrap_or_else(|| vec![0.0; wd.len()]));
            let mut dx = x_rg.then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; xd.len()]));
            for s in 0..n {
                im2col(&g[s * ol..(s + 1) * ol], &geom, &mut gcols);
                if let Some(dx) = dx.as_mut() {
                    gemm(cin, rows, pin, wd, Strides::rm(rows), &gcols, Strides::rm(pin), &mut dx[s * cin * pin..(s + 1) * cin * pin], Strides::rm(pin), true);
                }
                if let Some(dw) = dw.as_mut() {
                    gemm(cin, pin, rows, &xd[s * cin * pin..(s + 1) * cin * pin], Strides::rm(pin), &gcols, Strides::rm_t(pin), dw, Strides::rm(rows), true);
                }
            }
            if let Some(dw) = dw {
                grads[w.0] = Some(dw);
            }
            if let Some(dx) = dx {
                grads[x.0] = Some(dx);
            }
        }
        &Op::Add(a, b) => {
            if nodes[a.0].value.shape() == nodes[b.0].value.shape() {
                accumulate(nodes, grads, a, g.to_vec());
                accumulate(nodes, grads, b, g.to_vec());
            } else {
                reduce_broadcast(nodes, grads, node.value.shape(), a, b, g, |_, _, _| 1.0, |_, _, _| 1.0);
            }
        }
        &Op::Sub(a, b) => {
            if nodes[a.0].value.shape() == nodes[b.0].value.shape() {
                accumulate(nodes, grads, a, g.to_vec());
                accumulate(nodes, grads, b, g.iter().map(|v| -v).collect());
            } else {
                reduce_broadcast(nodes, grads, node.value.shape(), a, b, g, |_, _, _| 1.0, |_, _, _| -1.0);
            }
        }
        &Op::Mul(a, b) => {
            let (da, db) = (val(a), val(b));
            if nodes[a.0].value.shape() == nodes[b.0].value.shape() {
                if nodes[a.0].requires_grad {
                    accumulate(nodes, grads, a, map_grad(g, db, |g, y| g * y));
                }
                if nodes[b.0].requires_grad {
                    accumulate(nodes, grads, b, map_grad(g, da, |g, x| g * x));
                }
            } else {
                reduce_broadcast(nodes, grads, node.value.shape(), a, b, g, |_, _, j| db[j], |_, i, _| da[i]);
            }
        }
        &Op::Scale(x, f) => accumulate(nodes, grads, x, g.iter().map(|v| v * f).collect()),
        &Op::Relu(x) => accumulate(nodes, grads, x, map_grad(g, val(x), |g, x| if x > 0.0 { g } else { 0.0 })),
        &Op::LeakyRelu(x) => accumulate(
            nodes,
            grads,
            x,
            map_grad(g, val(x), |g, x| if x > 0.0 { g } else { LEAKY_SLOPE * g }),
        ),
        &Op::Tanh(x) => accumulate(nodes, grads, x, map_grad(g, node.value.data(), |g, y| g * (1.0 - y * y))),
        &Op::ClampMin(x, floor) => {
            accumulate(nodes, grads, x, map_grad(g, val(x), |g, x| if x > floor { g } else { 0.0 }))
        }
        &Op::Log(x) => accumulate(nodes, grads, x, map_grad(g, val(x), |g, x| g / x)),
        Op::MaxPool2d { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src as usize] += gv;
                }
            }
        }
        &Op::Reshape(x) => accumulate(nodes, grads, x, g.to_vec()),
        &Op::Softmax(x) => {
            let c = *node.value.shape().last().expect("softmax has a last axis");
            let y = node.value.data();
            let mut dx = vec![0.0; y.len()];
            for ((dr, yr), gr) in dx.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(g.chunks_exact(c)) {
                let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for k in 0..c {
                    dr[k] = yr[k] * (gr[k] - dot);
                }
            }
            accumulate(nodes, grads, x, dx);
        }
        &Op::LogSoftmax(x) => {
            let c = *node.value.shape().last().expect("log_softmax has a last axis");
            let y = node.value.data();
            let mut dx = vec![0.0; y.len()];
            for ((dr, yr), gr) in dx.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(g.chunks_exact(c)) {
                let total: f32 = gr.iter().sum();
                for k in 0..c {
                    dr[k] = gr[k] - yr[k].exp() * total;
                }
            }
            accumulate(nodes, grads, x, dx);
        }
        &Op::Mean(x) => {
            let n = nodes[x.0].value.len();
            accumulate(nodes, grads, x, vec![g[0] / n.max(1) as f32; n]);
        }
        &Op::Sum(x) => {
            let n = nodes[x.0].value.len();
            accumulate(nodes, grads, x, vec![g[0]; n]);
        }
        &Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = around(nodes[x.0].value.shape(), axis);
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        dx[(o * len + a) * inner + i] = g[o * inner + i] / len as f32;
                    }
                }
            }
            accumulate(nodes, grads, x, dx);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let shape = nodes[x.0].value.shape();
            let c = shape[1];
            let (outer, _, inner) = around(shape, 1);
            let m = (outer * inner) as f32;
            let mut sum_g = vec![0.0f32; c];
            let mut sum_gx = vec![0.0f32; c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for ch in 0..c {
                    dg[ch] += sum_gx[ch];
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for ch in 0..c {
                    db[ch] += sum_g[ch];
                }
            }
            let gd = nodes[gamma.0].value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for ch in 0..c {
                        let scale = gd[ch] * inv_std[ch];
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            dx[i] += if *batch_stats {
                                scale * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Fills gradients of the scalar `loss` with respect to every node that
    /// requires one. A tape supports one backward pass; call [`Tape::clear`]
    /// before recording the next step.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed by a previous backward".into()));
        }
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Backward(format!("node {} is not on this tape", loss.0)));
        };
        if node.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward("loss does not depend on any differentiable input".into()));
        }
        self.consumed = true;
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}
