//! Tape-based reverse-mode differentiation. Nodes are appended in evaluation
//! order, so the tape is topologically sorted by construction and backward
//! is a single reverse sweep.

use super::conv::{self, conv_output_len, ConvGeom};
use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    NormAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    Dense { x: Var, w: Var, b: Var, n: usize },
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom },
    MaxPool2d { x: Var, arg: Vec<usize> },
    GlobalAvgPool { x: Var, spatial: usize },
    BatchNorm(Box<BatchNormTape>),
    Squash(Var),
    CapsPredict { u: Var, w: Var, n: usize },
    WeightedSum { c: Var, uhat: Var, n: usize },
    Agreement { uhat: Var, v: Var, n: usize },
    Mse { x: Var, target: Vec<f64> },
    MarginLoss { lengths: Var, targets: Vec<usize>, m_plus: f64, m_minus: f64, lambda: f64 },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct BatchNormTape {
    x: Var,
    gamma: Var,
    beta: Var,
    channels: usize,
    spatial: usize,
    batch: usize,
    /// normalized input (train mode) for the backward pass
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    /// running statistics were used instead of batch statistics
    frozen: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _) | MulConst(a, _) | Relu(a) | Sigmoid(a) | Reshape(a) | Sum(a)
            | Mean(a) | Squash(a) => vec![*a],
            SumAxis { x, .. } | MeanAxis { x, .. } | NormAxis { x, .. } | Softmax { x, .. } => {
                vec![*x]
            }
            Permute { x, .. } => vec![*x],
            Dense { x, w, b, .. } => vec![*x, *w, *b],
            Conv2d { x, k, b, .. } => vec![*x, *k, *b],
            MaxPool2d { x, .. } | GlobalAvgPool { x, .. } => vec![*x],
            BatchNorm(t) => vec![t.x, t.gamma, t.beta],
            CapsPredict { u, w, .. } => vec![*u, *w],
            WeightedSum { c, uhat, .. } => vec![*c, *uhat],
            Agreement { uhat, v, .. } => vec![*uhat, *v],
            Mse { x, .. } => vec![*x],
            MarginLoss { lengths, .. } => vec![*lengths],
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `(outer, len, inner)` strides around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Calls `f(dst, src)` for every element, where `dst` indexes the permuted
/// layout and `src` the original one.
fn for_each_permuted(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for k in (0..rank.saturating_sub(1)).rev() {
        in_strides[k] = in_strides[k + 1] * shape[k + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&k| shape[k]).collect();
    let strides: Vec<usize> = axes.iter().map(|&k| in_strides[k]).collect();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..total {
        f(dst, src);
        for k in (0..rank).rev() {
            idx[k] += 1;
            src += strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            src -= strides[k] * out_shape[k];
            idx[k] = 0;
        }
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn scalar_shape() -> Vec<usize> {
    vec![1]
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NumericFault { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient accumulated by the last [`Graph::backward`], if any reached
    /// this node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient, or zeros when nothing flowed into the node.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).len()])
    }

    /// Batch mean and (biased) variance computed by a training-mode batch
    /// norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm(t) if !t.frozen => Some((&t.batch_mean, &t.batch_var)),
            _ => None,
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape(), va.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.map(a, |x| x * factor);
        self.push(Op::Scale(a, factor), v, "scale")
    }

    /// Elementwise product with a constant (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err(format!(
                "mul_const: {} constants for {} values",
                c.len(),
                self.value(a).len()
            )));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(&c).map(|(x, m)| x * m).collect();
        let v = Tensor::new(va.shape(), data)?;
        self.push(Op::MulConst(a, c), v, "mul_const")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        self.push(Op::Relu(a), v, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v, "sigmoid")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        self.push(Op::Reshape(a), v, "reshape")
    }

    /// Reorder axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&k| k >= shape.len() || std::mem::replace(&mut seen[k], true)) {
            return Err(shape_err(format!("permute: {axes:?} is not a permutation of {} axes", shape.len())));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&k| shape[k]).collect();
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for_each_permuted(&shape, axes, |dst, s| out[dst] = src[s]);
        let v = Tensor::new(&out_shape, out)?;
        self.push(Op::Permute { x: a, axes: axes.to_vec() }, v, "permute")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), "mean")
    }

    fn reduced_shape(&self, a: Var, axis: usize, op: &str) -> Result<Vec<usize>> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(shape_err(format!("{op}: axis {axis} out of range for {shape:?}")));
        }
        let mut out: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out.is_empty() {
            out = scalar_shape();
        }
        Ok(out)
    }

    fn reduce_axis(&self, a: Var, axis: usize, f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Vec<f64> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut it = (0..len).map(|k| d[(o * len + k) * inner + i]);
                out.push(f(&mut it));
            }
        }
        out
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.reduced_shape(a, axis, "sum_axis")?;
        let data = self.reduce_axis(a, axis, |it| it.sum());
        let v = Tensor::new(&shape, data)?;
        self.push(Op::SumAxis { x: a, axis }, v, "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.reduced_shape(a, axis, "mean_axis")?;
        let len = self.shape(a)[axis] as f64;
        let data = self.reduce_axis(a, axis, |it| it.sum::<f64>() / len);
        let v = Tensor::new(&shape, data)?;
        self.push(Op::MeanAxis { x: a, axis }, v, "mean_axis")
    }

    /// Euclidean norm along `axis`.
    pub fn norm_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.reduced_shape(a, axis, "norm_axis")?;
        let data = self.reduce_axis(a, axis, |it| it.map(|x| x * x).sum::<f64>().sqrt());
        let v = Tensor::new(&shape, data)?;
        self.push(Op::NormAxis { x: a, axis }, v, "norm_axis")
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(shape_err(format!("softmax: axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (d[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        self.push(Op::Softmax { x: a, axis }, v, "softmax")
    }

    /// `x · wᵀ + b` with `x: [N, in]` (or `[in]`), `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, fan_in, batched) = match xs.as_slice() {
            [i] => (1, *i, false),
            [n, i] => (*n, *i, true),
            _ => return Err(shape_err(format!("dense: input must be rank 1 or 2, got {xs:?}"))),
        };
        if ws.len() != 2 || ws[1] != fan_in || self.shape(b) != [ws[0]] {
            return Err(shape_err(format!(
                "dense: input {xs:?}, weight {ws:?}, bias {:?} do not conform",
                self.shape(b)
            )));
        }
        let out = ws[0];
        let mut y = Vec::with_capacity(n * out);
        for _ in 0..n {
            y.extend_from_slice(self.value(b).data());
        }
        gemm(
            n,
            fan_in,
            out,
            1.0,
            self.value(x).data(),
            (fan_in, 1),
            self.value(w).data(),
            (1, fan_in),
            1.0,
            &mut y,
            (out, 1),
        );
        let shape = if batched { vec![n, out] } else { vec![out] };
        let v = Tensor::new(&shape, y)?;
        self.push(Op::Dense { x, w, b, n }, v, "dense")
    }

    /// Valid cross-correlation plus per-channel bias.
    /// `x: [C, H, W]` or `[N, C, H, W]`, `k: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (n, c, h, w, batched) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [n, c, h, w] => (*n, *c, *h, *w, true),
            _ => return Err(shape_err(format!("conv2d: input must be rank 3 or 4, got {xs:?}"))),
        };
        if ks.len() != 4 || ks[1] != c || self.shape(b) != [ks[0]] {
            return Err(shape_err(format!(
                "conv2d: input {xs:?}, kernel {ks:?}, bias {:?} do not conform",
                self.shape(b)
            )));
        }
        let (oh, ow) = match (
            conv_output_len(h, ks[2], stride.0),
            conv_output_len(w, ks[3], stride.1),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(shape_err(format!(
                    "conv2d: kernel {}x{} larger than input {h}x{w} (or zero stride)",
                    ks[2], ks[3]
                )))
            }
        };
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o: ks[0],
            kh: ks[2],
            kw: ks[3],
            sh: stride.0,
            sw: stride.1,
            oh,
            ow,
        };
        let y = conv::conv2d_forward(
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
            &geom,
        );
        let shape = if batched { vec![n, ks[0], oh, ow] } else { vec![ks[0], oh, ow] };
        let v = Tensor::new(&shape, y)?;
        self.push(Op::Conv2d { x, k, b, geom }, v, "conv2d")
    }

    /// Non-overlapping max pooling over the last two axes; trailing rows or
    /// columns that do not fill a window are dropped.
    pub fn maxpool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 || window.0 == 0 || window.1 == 0 {
            return Err(shape_err(format!("maxpool2d: input {xs:?} window {window:?}")));
        }
        let r = xs.len();
        let (h, w) = (xs[r - 2], xs[r - 1]);
        if h < window.0 || w < window.1 {
            return Err(shape_err(format!(
                "maxpool2d: window {window:?} larger than {h}x{w}"
            )));
        }
        let planes: usize = xs[..r - 2].iter().product();
        let (y, arg) = conv::maxpool_forward(self.value(x).data(), planes, h, w, window.0, window.1);
        let mut shape = xs[..r - 2].to_vec();
        shape.extend([h / window.0, w / window.1]);
        let v = Tensor::new(&shape, y)?;
        self.push(Op::MaxPool2d { x, arg }, v, "maxpool2d")
    }

    /// Mean over the last two axes: `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(shape_err(format!("global_avg_pool: input {xs:?}")));
        }
        let r = xs.len();
        let spatial = xs[r - 2] * xs[r - 1];
        let d = self.value(x).data();
        let y: Vec<f64> = d
            .chunks_exact(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        let v = Tensor::new(&xs[..r - 2], y)?;
        self.push(Op::GlobalAvgPool { x, spatial }, v, "global_avg_pool")
    }

    /// Batch normalization over channel axis 1 of `[N, C, ...]`. With
    /// `running = Some((mean, var))` the given statistics are used (inference);
    /// otherwise batch statistics are computed and retrievable through
    /// [`Graph::batch_stats`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(shape_err(format!(
                "batch_norm: input {xs:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let d = self.value(x).data();
        let count = (batch * spatial) as f64;
        let idx = |n: usize, c: usize, s: usize| (n * channels + c) * spatial + s;
        let (mean, var, frozen) = match running {
            Some((m, v)) => {
                if m.len() != channels || v.len() != channels {
                    return Err(shape_err("batch_norm: running stats length".into()));
                }
                (m.to_vec(), v.to_vec(), true)
            }
            None => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for n in 0..batch {
                        for p in 0..spatial {
                            s += d[idx(n, c, p)];
                        }
                    }
                    mean[c] = s / count;
                    let mut q = 0.0;
                    for n in 0..batch {
                        for p in 0..spatial {
                            let z = d[idx(n, c, p)] - mean[c];
                            q += z * z;
                        }
                    }
                    var[c] = q / count;
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; d.len()];
        let mut y = vec![0.0; d.len()];
        for n in 0..batch {
            for c in 0..channels {
                for p in 0..spatial {
                    let i = idx(n, c, p);
                    xhat[i] = (d[i] - mean[c]) * inv_std[c];
                    y[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let v = Tensor::new(&xs, y)?;
        let tape = BatchNormTape {
            x,
            gamma,
            beta,
            channels,
            spatial,
            batch,
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            frozen,
        };
        self.push(Op::BatchNorm(Box::new(tape)), v, "batch_norm")
    }

    /// Capsule squashing along the last axis, `v = s·‖s‖ / (1 + ‖s‖²)`,
    /// which equals `‖s‖²/(1+‖s‖²) · s/‖s‖` and is 0 at the origin.
    pub fn squash(&mut self, s: Var) -> Result<Var> {
        let t = self.value(s);
        let dim = *t.shape().last().expect("non-empty shape");
        let mut out = Vec::with_capacity(t.len());
        for chunk in t.data().chunks_exact(dim) {
            let n = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
            let f = n / (1.0 + n * n);
            out.extend(chunk.iter().map(|x| f * x));
        }
        let v = Tensor::new(t.shape(), out)?;
        self.push(Op::Squash(s), v, "squash")
    }

    /// Prediction vectors `û_{j|i} = W_ij · u_i`.
    /// `u: [N, I, d_in]` (or `[I, d_in]`), `w: [I, J, d_out, d_in]`
    /// → `[N, I, J, d_out]` (or `[I, J, d_out]`).
    pub fn caps_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, i_caps, d_in, batched) = match us.as_slice() {
            [i, d] => (1, *i, *d, false),
            [n, i, d] => (*n, *i, *d, true),
            _ => return Err(shape_err(format!("caps_predict: u must be rank 2 or 3, got {us:?}"))),
        };
        if ws.len() != 4 || ws[0] != i_caps || ws[3] != d_in {
            return Err(shape_err(format!("caps_predict: u {us:?} and W {ws:?} do not conform")));
        }
        let (j_caps, d_out) = (ws[1], ws[2]);
        let ud = self.value(u).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; n * i_caps * j_caps * d_out];
        for s in 0..n {
            for i in 0..i_caps {
                let ui = &ud[(s * i_caps + i) * d_in..][..d_in];
                for j in 0..j_caps {
                    let wij = &wd[(i * j_caps + j) * d_out * d_in..][..d_out * d_in];
                    let dst = &mut out[((s * i_caps + i) * j_caps + j) * d_out..][..d_out];
                    for (a, o) in dst.iter_mut().enumerate() {
                        *o = wij[a * d_in..(a + 1) * d_in]
                            .iter()
                            .zip(ui)
                            .map(|(p, q)| p * q)
                            .sum();
                    }
                }
            }
        }
        let shape = if batched {
            vec![n, i_caps, j_caps, d_out]
        } else {
            vec![i_caps, j_caps, d_out]
        };
        let v = Tensor::new(&shape, out)?;
        self.push(Op::CapsPredict { u, w, n }, v, "caps_predict")
    }

    fn caps_dims(&self, uhat: Var) -> Result<(usize, usize, usize, usize, bool)> {
        match self.shape(uhat) {
            [i, j, d] => Ok((1, *i, *j, *d, false)),
            [n, i, j, d] => Ok((*n, *i, *j, *d, true)),
            s => Err(shape_err(format!("prediction tensor must be rank 3 or 4, got {s:?}"))),
        }
    }

    /// `s_j = Σ_i c_ij · û_{j|i}`; `c: [N, I, J]`, `uhat: [N, I, J, D]` → `[N, J, D]`.
    pub fn weighted_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let (n, i_caps, j_caps, d, batched) = self.caps_dims(uhat)?;
        let want: Vec<usize> = if batched { vec![n, i_caps, j_caps] } else { vec![i_caps, j_caps] };
        if self.shape(c) != want.as_slice() {
            return Err(shape_err(format!(
                "weighted_sum: couplings {:?}, expected {want:?}",
                self.shape(c)
            )));
        }
        let cd = self.value(c).data();
        let ud = self.value(uhat).data();
        let mut out = vec![0.0; n * j_caps * d];
        for s in 0..n {
            for i in 0..i_caps {
                for j in 0..j_caps {
                    let cij = cd[(s * i_caps + i) * j_caps + j];
                    let src = &ud[((s * i_caps + i) * j_caps + j) * d..][..d];
                    let dst = &mut out[(s * j_caps + j) * d..][..d];
                    for (o, x) in dst.iter_mut().zip(src) {
                        *o += cij * x;
                    }
                }
            }
        }
        let shape = if batched { vec![n, j_caps, d] } else { vec![j_caps, d] };
        let v = Tensor::new(&shape, out)?;
        self.push(Op::WeightedSum { c, uhat, n }, v, "weighted_sum")
    }

    /// Agreement `a_ij = û_{j|i} · v_j`; `uhat: [N, I, J, D]`, `v: [N, J, D]` → `[N, I, J]`.
    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let (n, i_caps, j_caps, d, batched) = self.caps_dims(uhat)?;
        let want: Vec<usize> = if batched { vec![n, j_caps, d] } else { vec![j_caps, d] };
        if self.shape(v) != want.as_slice() {
            return Err(shape_err(format!(
                "agreement: outputs {:?}, expected {want:?}",
                self.shape(v)
            )));
        }
        let ud = self.value(uhat).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; n * i_caps * j_caps];
        for s in 0..n {
            for i in 0..i_caps {
                for j in 0..j_caps {
                    let u = &ud[((s * i_caps + i) * j_caps + j) * d..][..d];
                    let vj = &vd[(s * j_caps + j) * d..][..d];
                    out[(s * i_caps + i) * j_caps + j] = u.iter().zip(vj).map(|(a, b)| a * b).sum();
                }
            }
        }
        let shape = if batched { vec![n, i_caps, j_caps] } else { vec![i_caps, j_caps] };
        let val = Tensor::new(&shape, out)?;
        self.push(Op::Agreement { uhat, v, n }, val, "agreement")
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let d = self.value(x).data();
        if d.len() != target.len() {
            return Err(shape_err(format!("mse: {} values vs {} targets", d.len(), target.len())));
        }
        let m = d.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d.len() as f64;
        self.push(
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            Tensor::scalar(m),
            "mse",
        )
    }

    fn class_rows(&self, x: Var, targets: &[usize], op: &str) -> Result<(usize, usize)> {
        let (n, k) = match self.shape(x) {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            s => return Err(shape_err(format!("{op}: scores must be rank 1 or 2, got {s:?}"))),
        };
        if targets.len() != n {
            return Err(shape_err(format!("{op}: {} targets for {n} rows", targets.len())));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!("{op}: target class {t} out of range for {k} classes")));
        }
        Ok((n, k))
    }

    /// Batch mean of the per-sample capsule margin loss
    /// `Σ_c T_c·max(0, m⁺−‖v_c‖)² + λ(1−T_c)·max(0, ‖v_c‖−m⁻)²`.
    pub fn margin_loss(
        &mut self,
        lengths: Var,
        targets: &[usize],
        m_plus: f64,
        m_minus: f64,
        lambda: f64,
    ) -> Result<Var> {
        let (n, k) = self.class_rows(lengths, targets, "margin_loss")?;
        let d = self.value(lengths).data();
        let mut total = 0.0;
        for (s, &t) in targets.iter().enumerate() {
            for c in 0..k {
                let l = d[s * k + c];
                total += if c == t {
                    (m_plus - l).max(0.0).powi(2)
                } else {
                    lambda * (l - m_minus).max(0.0).powi(2)
                };
            }
        }
        let op = Op::MarginLoss {
            lengths,
            targets: targets.to_vec(),
            m_plus,
            m_minus,
            lambda,
        };
        self.push(op, Tensor::scalar(total / n as f64), "margin_loss")
    }

    /// Batch mean of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.class_rows(logits, targets, "softmax_cross_entropy")?;
        let d = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for s in 0..n {
            let row = &d[s * k..(s + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for c in 0..k {
                probs[s * k + c] = (row[c] - max).exp() / z;
            }
            total += z.ln() + max - row[targets[s]];
        }
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(op, Tensor::scalar(total / n as f64), "softmax_cross_entropy")
    }

    /// Populate gradients of the scalar `loss` on every node that requires
    /// them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &gy);
            self.nodes[i].grad = Some(gy);
            for (v, g) in contributions {
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<f64>| {
            if wants(v) {
                out.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| gy.to_vec());
                emit(*b, &|| gy.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, &|| gy.to_vec());
                emit(*b, &|| gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                emit(*a, &|| gy.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                emit(*b, &|| gy.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, f) => emit(*a, &|| gy.iter().map(|g| g * f).collect()),
            Op::MulConst(a, c) => emit(*a, &|| gy.iter().zip(c).map(|(g, m)| g * m).collect()),
            Op::Relu(a) => emit(*a, &|| {
                gy.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect()
            }),
            Op::Sigmoid(a) => emit(*a, &|| {
                gy.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect()
            }),
            Op::Reshape(a) => emit(*a, &|| gy.to_vec()),
            Op::Permute { x, axes } => emit(*x, &|| {
                let mut g = vec![0.0; gy.len()];
                for_each_permuted(self.nodes[x.0].value.shape(), axes, |dst, s| g[s] = gy[dst]);
                g
            }),
            Op::Sum(a) => emit(*a, &|| vec![gy[0]; val(*a).len()]),
            Op::Mean(a) => emit(*a, &|| {
                let n = val(*a).len();
                vec![gy[0] / n as f64; n]
            }),
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } | Op::NormAxis { x, axis } => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let xd = val(*x);
                let yd = node.value.data();
                let kind = match &node.op {
                    Op::SumAxis { .. } => 0,
                    Op::MeanAxis { .. } => 1,
                    _ => 2,
                };
                emit(*x, &|| {
                    let mut g = vec![0.0; xd.len()];
                    for o in 0..outer {
                        for q in 0..inner {
                            let r = o * inner + q;
                            for k in 0..len {
                                let idx = (o * len + k) * inner + q;
                                g[idx] = match kind {
                                    0 => gy[r],
                                    1 => gy[r] / len as f64,
                                    _ if yd[r] > 0.0 => gy[r] * xd[idx] / yd[r],
                                    _ => 0.0,
                                };
                            }
                        }
                    }
                    g
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let yd = node.value.data();
                emit(*x, &|| {
                    let mut g = vec![0.0; yd.len()];
                    for o in 0..outer {
                        for q in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + q;
                            let dot: f64 = (0..len).map(|k| gy[idx(k)] * yd[idx(k)]).sum();
                            for k in 0..len {
                                g[idx(k)] = yd[idx(k)] * (gy[idx(k)] - dot);
                            }
                        }
                    }
                    g
                });
            }
            Op::Dense { x, w, b, n } => {
                let ws = self.nodes[w.0].value.shape();
                let (out_dim, fan_in) = (ws[0], ws[1]);
                let n = *n;
                emit(*x, &|| {
                    let mut g = vec![0.0; n * fan_in];
                    gemm(n, out_dim, fan_in, 1.0, gy, (out_dim, 1), val(*w), (fan_in, 1), 0.0, &mut g, (fan_in, 1));
                    g
                });
                emit(*w, &|| {
                    let mut g = vec![0.0; out_dim * fan_in];
                    gemm(out_dim, n, fan_in, 1.0, gy, (1, out_dim), val(*x), (fan_in, 1), 0.0, &mut g, (fan_in, 1));
                    g
                });
                emit(*b, &|| {
                    let mut g = vec![0.0; out_dim];
                    for row in gy.chunks_exact(out_dim) {
                        g.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    g
                });
            }
            Op::Conv2d { x, k, b, geom } => {
                let want_dx = wants(*x);
                if want_dx || wants(*k) || wants(*b) {
                    let (dx, dk, db) = conv::conv2d_backward(val(*x), val(*k), gy, geom, want_dx);
                    if let Some(dx) = dx {
                        out.push((*x, dx));
                    }
                    if wants(*k) {
                        out.push((*k, dk));
                    }
                    if wants(*b) {
                        out.push((*b, db));
                    }
                }
            }
            Op::MaxPool2d { x, arg } => emit(*x, &|| {
                let mut g = vec![0.0; val(*x).len()];
                for (gv, &src) in gy.iter().zip(arg) {
                    g[src] += gv;
                }
                g
            }),
            Op::GlobalAvgPool { x, spatial } => emit(*x, &|| {
                gy.iter()
                    .flat_map(|g| std::iter::repeat(g / *spatial as f64).take(*spatial))
                    .collect()
            }),
            Op::BatchNorm(t) => {
                let (c_n, sp, bn) = (t.channels, t.spatial, t.batch);
                let idx = |n: usize, c: usize, s: usize| (n * c_n + c) * sp + s;
                let gamma = val(t.gamma);
                let sum_per_channel = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
                    (0..c_n)
                        .map(|c| {
                            let mut acc = 0.0;
                            for n in 0..bn {
                                for s in 0..sp {
                                    acc += f(idx(n, c, s));
                                }
                            }
                            acc
                        })
                        .collect()
                };
                let dgamma = sum_per_channel(&|i| gy[i] * t.xhat[i]);
                let dbeta = sum_per_channel(&|i| gy[i]);
                emit(t.x, &|| {
                    let mut g = vec![0.0; gy.len()];
                    let m = (bn * sp) as f64;
                    for c in 0..c_n {
                        for n in 0..bn {
                            for s in 0..sp {
                                let i = idx(n, c, s);
                                g[i] = if t.frozen {
                                    gy[i] * gamma[c] * t.inv_std[c]
                                } else {
                                    // dxhat = gy·γ; Σdxhat = γ·dβ, Σ(dxhat·xhat) = γ·dγ
                                    gamma[c] * t.inv_std[c] / m
                                        * (m * gy[i] - dbeta[c] - t.xhat[i] * dgamma[c])
                                };
                            }
                        }
                    }
                    g
                });
                emit(t.gamma, &|| dgamma.clone());
                emit(t.beta, &|| dbeta.clone());
            }
            Op::Squash(s) => {
                let sd = val(*s);
                let dim = *node.value.shape().last().expect("non-empty shape");
                emit(*s, &|| {
                    let mut g = vec![0.0; sd.len()];
                    for ((sv, gv), dst) in sd
                        .chunks_exact(dim)
                        .zip(gy.chunks_exact(dim))
                        .zip(g.chunks_exact_mut(dim))
                    {
                        let n2: f64 = sv.iter().map(|x| x * x).sum();
                        let n = n2.sqrt();
                        let f = n / (1.0 + n2);
                        let dot: f64 = sv.iter().zip(gv).map(|(a, b)| a * b).sum();
                        // d/ds [f(n) s] = f I + f'(n)/n · s sᵀ,  f'(n) = (1-n²)/(1+n²)²
                        let radial = if n > 0.0 {
                            (1.0 - n2) / ((1.0 + n2) * (1.0 + n2)) / n * dot
                        } else {
                            0.0
                        };
                        for ((d, x), gq) in dst.iter_mut().zip(sv).zip(gv) {
                            *d = f * gq + radial * x;
                        }
                    }
                    g
                });
            }
            Op::CapsPredict { u, w, n } => {
                let ws = self.nodes[w.0].value.shape();
                let (i_caps, j_caps, d_out, d_in) = (ws[0], ws[1], ws[2], ws[3]);
                let n = *n;
                let ud = val(*u);
                let wd = val(*w);
                emit(*u, &|| {
                    let mut g = vec![0.0; ud.len()];
                    for s in 0..n {
                        for i in 0..i_caps {
                            let dst = &mut g[(s * i_caps + i) * d_in..][..d_in];
                            for j in 0..j_caps {
                                let wij = &wd[(i * j_caps + j) * d_out * d_in..][..d_out * d_in];
                                let gij = &gy[((s * i_caps + i) * j_caps + j) * d_out..][..d_out];
                                for (a, ga) in gij.iter().enumerate() {
                                    for (b, d) in dst.iter_mut().enumerate() {
                                        *d += wij[a * d_in + b] * ga;
                                    }
                                }
                            }
                        }
                    }
                    g
                });
                emit(*w, &|| {
                    let mut g = vec![0.0; wd.len()];
                    for s in 0..n {
                        for i in 0..i_caps {
                            let ui = &ud[(s * i_caps + i) * d_in..][..d_in];
                            for j in 0..j_caps {
                                let gij = &gy[((s * i_caps + i) * j_caps + j) * d_out..][..d_out];
                                let dst = &mut g[(i * j_caps + j) * d_out * d_in..][..d_out * d_in];
                                for (a, ga) in gij.iter().enumerate() {
                                    for (b, ub) in ui.iter().enumerate() {
                                        dst[a * d_in + b] += ga * ub;
                                    }
                                }
                            }
                        }
                    }
                    g
                });
            }
            Op::WeightedSum { c, uhat, n } => {
                let us = self.nodes[uhat.0].value.shape();
                let r = us.len();
                let (i_caps, j_caps, d) = (us[r - 3], us[r - 2], us[r - 1]);
                let n = *n;
                let cd = val(*c);
                let ud = val(*uhat);
                emit(*c, &|| {
                    let mut g = vec![0.0; cd.len()];
                    for s in 0..n {
                        for i in 0..i_caps {
                            for j in 0..j_caps {
                                let u = &ud[((s * i_caps + i) * j_caps + j) * d..][..d];
                                let gs = &gy[(s * j_caps + j) * d..][..d];
                                g[(s * i_caps + i) * j_caps + j] = u.iter().zip(gs).map(|(a, b)| a * b).sum();
                            }
                        }
                    }
                    g
                });
                emit(*uhat, &|| {
                    let mut g = vec![0.0; ud.len()];
                    for s in 0..n {
                        for i in 0..i_caps {
                            for j in 0..j_caps {
                                let cij = cd[(s * i_caps + i) * j_caps + j];
                                let gs = &gy[(s * j_caps + j) * d..][..d];
                                let dst = &mut g[((s * i_caps + i) * j_caps + j) * d..][..d];
                                for (o, x) in dst.iter_mut().zip(gs) {
                                    *o = cij * x;
                                }
                            }
                        }
                    }
                    g
                });
            }
            Op::Agreement { uhat, v, n } => {
                let us = self.nodes[uhat.0].value.shape();
                let r = us.len();
                let (i_caps, j_caps, d) = (us[r - 3], us[r - 2], us[r - 1]);
                let n = *n;
                let ud = val(*uhat);
                let vd = val(*v);
                emit(*uhat, &|| {
                    let mut g = vec![0.0; ud.len()];
                    for s in 0..n {
                        for i in 0..i_caps {
                            for j in 0..j_caps {
                                let ga = gy[(s * i_caps + i) * j_caps + j];
                                let vj = &vd[(s * j_caps + j) * d..][..d];
                                let dst = &mut g[((s * i_caps + i) * j_caps + j) * d..][..d];
                                for (o, x) in dst.iter_mut().zip(vj) {
                                    *o = ga * x;
                                }
                            }
                        }
                    }
                    g
                });
                emit(*v, &|| {
                    let mut g = vec![0.0; vd.len()];
                    for s in 0..n {
                        for i in 0..i_caps {
                            for j in 0..j_caps {
                                let ga = gy[(s * i_caps + i) * j_caps + j];
                                let u = &ud[((s * i_caps + i) * j_caps + j) * d..][..d];
                                let dst = &mut g[(s * j_caps + j) * d..][..d];
                                for (o, x) in dst.iter_mut().zip(u) {
                                    *o += ga * x;
                                }
                            }
                        }
                    }
                    g
                });
            }
            Op::Mse { x, target } => emit(*x, &|| {
                let xd = val(*x);
                let scale = 2.0 * gy[0] / xd.len() as f64;
                xd.iter().zip(target).map(|(a, b)| scale * (a - b)).collect()
            }),
            Op::MarginLoss {
                lengths,
                targets,
                m_plus,
                m_minus,
                lambda,
            } => emit(*lengths, &|| {
                let ld = val(*lengths);
                let n = targets.len();
                let k = ld.len() / n;
                let scale = gy[0] / n as f64;
                let mut g = vec![0.0; ld.len()];
                for (s, &t) in targets.iter().enumerate() {
                    for c in 0..k {
                        let l = ld[s * k + c];
                        g[s * k + c] = scale
                            * if c == t {
                                -2.0 * (m_plus - l).max(0.0)
                            } else {
                                2.0 * lambda * (l - m_minus).max(0.0)
                            };
                    }
                }
                g
            }),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => emit(*logits, &|| {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = gy[0] / n as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (s, &t) in targets.iter().enumerate() {
                    g[s * k + t] -= scale;
                }
                g
            }),
        }
        out
    }
}
