//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every primitive appends a node holding its output value and the ids of
//! its inputs. Node ids are assigned in execution order, so the tape is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! ```
//! use ssmamba_core::autodiff::Tape;
//! use ssmamba_core::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::full(&[3], 1.5));
//! let loss = x.scale(2.0).sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
//! ```

pub mod gradcheck;
mod kernels;

use std::cell::{Cell, Ref, RefCell};
use std::fmt::Debug;

pub use kernels::Unary;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A fused operation with a hand-written vector-Jacobian product.
pub trait CustomOp<T: Scalar>: Debug {
    fn name(&self) -> &'static str;

    /// Gradients for every input, in input order.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

/// Where batch-norm statistics come from.
#[derive(Clone, Debug)]
pub enum NormStats<T> {
    /// Per-channel statistics of the current batch (training mode).
    Batch,
    /// Frozen running statistics (evaluation mode).
    Running { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize, usize),
    Sub(usize, usize, usize),
    Mul(usize, usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddChannel(usize, usize),
    MulChannel(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Unary(usize, Unary),
    LogSoftmax(usize),
    DepthwiseConv1d {
        x: usize,
        w: usize,
        causal: bool,
    },
    Conv1d {
        x: usize,
        w: usize,
    },
    DepthwiseConv2d {
        x: usize,
        w: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat(usize, usize),
    Slice {
        x: usize,
        start: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Flip {
        x: usize,
        axis: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b, _) | Sub(a, b, _) | Mul(a, b, _) | AddChannel(a, b) | MulChannel(a, b) => {
                vec![*a, *b]
            }
            Concat(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Unary(x, _) | LogSoftmax(x) | Reshape(x) | SumAll(x)
            | MeanAll(x) => vec![*x],
            Slice { x, .. }
            | Permute { x, .. }
            | Flip { x, .. }
            | SumAxis { x, .. }
            | MeanAxis { x, .. }
            | Upsample { x, .. } => vec![*x],
            Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            DepthwiseConv1d { x, w, .. }
            | Conv1d { x, w }
            | DepthwiseConv2d { x, w }
            | Conv2d { x, w, .. } => vec![*x, *w],
            BatchNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of executed primitives.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records an output computed outside the tape together with a
    /// [`CustomOp`] that knows how to differentiate it.
    pub fn custom(
        &self,
        inputs: &[Var<'_, T>],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var<'_, T>> {
        for v in inputs {
            self.check_owner(*v, op.name())?;
        }
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                op,
            },
        ))
    }

    fn check_owner(&self, v: Var<'_, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(Error::Tape(format!("{op}: operand belongs to a different tape")))
        }
    }

    /// Reverse sweep from a 0-d loss. A tape supports exactly one sweep.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_owner(loss, "backward")?;
        if self.consumed.replace(true) {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.shape().is_empty() {
            return Err(Error::Tape(format!(
                "backward needs a 0-d loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = node_backward(&nodes, node, &g)?;
            grads[id] = Some(g);
            for (input, dg) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.data_mut().iter_mut().zip(dg.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward sweep, indexed by variable.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if any flowed into it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materializes zeros for variables the
    /// loss does not depend on.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn scale_tensor<T: Scalar>(t: &Tensor<T>, s: T) -> Tensor<T> {
    t.map(|v| v * s)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: Var<'_, T>, op: &'static str) -> Result<()> {
        self.tape.check_owner(other, op)
    }

    fn binary(self, other: Var<'t, T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, usize)> {
        self.same_tape(other, op)?;
        let (a, b) = (self.value(), other.value());
        let inner = kernels::trailing_broadcast(op, a.shape(), b.shape())?;
        Ok((kernels::binary_fwd(&a, &b, inner, f), inner))
    }

    /// Elementwise sum; `other` may broadcast along trailing singleton dims.
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        let (v, inner) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id, inner)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        let (v, inner) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id, inner)))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        let (v, inner) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id, inner)))
    }

    pub fn scale(self, s: f64) -> Self {
        let s = T::from_f64_lossy(s);
        let v = scale_tensor(&self.value(), s);
        self.tape.push(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::from_f64_lossy(c);
        let v = self.value().map(|x| x + c);
        self.tape.push(v, Op::AddScalar(self.id))
    }

    fn channel(self, v: Var<'t, T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_tape(v, op)?;
        let (x, vec) = (self.value(), v.value());
        let c = kernels::check_channel_vec(op, x.shape(), vec.shape())?;
        let vd = vec.data();
        let data = x.data().iter().enumerate().map(|(i, &a)| f(a, vd[i % c])).collect();
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    /// Adds a `[C]` vector to every row of a `[..., C]` tensor.
    pub fn add_channel(self, v: Var<'t, T>) -> Result<Self> {
        let out = self.channel(v, "add_channel", |a, b| a + b)?;
        Ok(self.tape.push(out, Op::AddChannel(self.id, v.id)))
    }

    /// Multiplies every row of a `[..., C]` tensor by a `[C]` vector.
    pub fn mul_channel(self, v: Var<'t, T>) -> Result<Self> {
        let out = self.channel(v, "mul_channel", |a, b| a * b)?;
        Ok(self.tape.push(out, Op::MulChannel(self.id, v.id)))
    }

    /// `x @ w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Self> {
        self.same_tape(w, "linear")?;
        if let Some(b) = b {
            self.same_tape(b, "linear")?;
        }
        let out = {
            let (x, wv) = (self.value(), w.value());
            let bv = b.map(|b| b.value());
            kernels::linear_check(x.shape(), wv.shape(), bv.as_ref().map(|b| b.shape()))?;
            kernels::linear_fwd(&x, &wv, bv.as_deref())
        };
        Ok(self.tape.push(
            out,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
        ))
    }

    pub fn unary(self, kind: Unary) -> Self {
        let v = self.value().map(|x| kind.apply(x));
        self.tape.push(v, Op::Unary(self.id, kind))
    }

    pub fn silu(self) -> Self {
        self.unary(Unary::Silu)
    }

    pub fn relu(self) -> Self {
        self.unary(Unary::Relu)
    }

    pub fn gelu(self) -> Self {
        self.unary(Unary::Gelu)
    }

    pub fn softplus(self) -> Self {
        self.unary(Unary::Softplus)
    }

    pub fn exp(self) -> Self {
        self.unary(Unary::Exp)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Unary::Sigmoid)
    }

    pub fn abs(self) -> Self {
        self.unary(Unary::Abs)
    }

    pub fn square(self) -> Self {
        self.unary(Unary::Square)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Self {
        let v = kernels::log_softmax_fwd(&self.value());
        self.tape.push(v, Op::LogSoftmax(self.id))
    }

    fn conv_1d_dw(self, w: Var<'t, T>, causal: bool) -> Result<Self> {
        let op = if causal { "causal_conv1d" } else { "depthwise_conv1d" };
        self.same_tape(w, op)?;
        let out = {
            let (x, wv) = (self.value(), w.value());
            kernels::dwconv1d_check(x.shape(), wv.shape(), causal)?;
            kernels::dwconv1d_fwd(&x, &wv, causal)
        };
        Ok(self.tape.push(
            out,
            Op::DepthwiseConv1d {
                x: self.id,
                w: w.id,
                causal,
            },
        ))
    }

    /// Centered depthwise convolution over `[B, L, C]` with `w: [C, k]`,
    /// `k` odd, zero padding `k / 2` on both sides.
    pub fn depthwise_conv1d(self, w: Var<'t, T>) -> Result<Self> {
        self.conv_1d_dw(w, false)
    }

    /// Causal depthwise convolution: `y[t] = sum_i w[i] * x[t - i]` with
    /// `k - 1` zeros of left padding.
    pub fn causal_conv1d(self, w: Var<'t, T>) -> Result<Self> {
        self.conv_1d_dw(w, true)
    }

    /// Centered full convolution over `[B, L, I]` with `w: [k, I, O]`.
    pub fn conv1d(self, w: Var<'t, T>) -> Result<Self> {
        self.same_tape(w, "conv1d")?;
        let out = {
            let (x, wv) = (self.value(), w.value());
            kernels::conv1d_check(x.shape(), wv.shape())?;
            kernels::conv1d_fwd(&x, &wv)
        };
        Ok(self.tape.push(out, Op::Conv1d { x: self.id, w: w.id }))
    }

    /// Centered depthwise convolution over `[B, H, W, C]` with `w: [C, k, k]`.
    pub fn depthwise_conv2d(self, w: Var<'t, T>) -> Result<Self> {
        self.same_tape(w, "depthwise_conv2d")?;
        let out = {
            let (x, wv) = (self.value(), w.value());
            kernels::dwconv2d_check(x.shape(), wv.shape())?;
            kernels::dwconv2d_fwd(&x, &wv)
        };
        Ok(self.tape.push(out, Op::DepthwiseConv2d { x: self.id, w: w.id }))
    }

    /// Dense convolution over `[B, H, W, I]` with `w: [k, k, I, O]`.
    pub fn conv2d(self, w: Var<'t, T>, stride: usize, pad: usize) -> Result<Self> {
        self.same_tape(w, "conv2d")?;
        let out = {
            let (x, wv) = (self.value(), w.value());
            let shape = kernels::conv2d_check(x.shape(), wv.shape(), stride, pad)?;
            kernels::conv2d_fwd(&x, &wv, stride, pad, &shape)
        };
        Ok(self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
        ))
    }

    /// Batch normalization over every axis but the last. With
    /// [`NormStats::Batch`] the returned pair carries the batch mean and
    /// biased variance so the caller can update running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        stats: NormStats<T>,
    ) -> Result<(Self, Option<(Vec<T>, Vec<T>)>)> {
        self.same_tape(gamma, "batch_norm")?;
        self.same_tape(beta, "batch_norm")?;
        let (out, xhat, inv, batch) = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            let c = kernels::check_channel_vec("batch_norm", x.shape(), g.shape())?;
            kernels::check_channel_vec("batch_norm", x.shape(), b.shape())?;
            let (mean, var, batch) = match stats {
                NormStats::Batch => {
                    let (m, v) = kernels::channel_moments(&x);
                    (m.clone(), v.clone(), Some((m, v)))
                }
                NormStats::Running { mean, var } => {
                    if mean.len() != c || var.len() != c {
                        return Err(Error::shape(
                            "batch_norm",
                            format!("running statistics of length {} for {c} channels", mean.len()),
                        ));
                    }
                    (mean, var, None)
                }
            };
            let (xhat, inv) = kernels::bn_normalize(&x, &mean, &var);
            let (gd, bd) = (g.data(), b.data());
            let data = xhat.iter().enumerate().map(|(i, &v)| gd[i % c] * v + bd[i % c]).collect();
            (Tensor::from_parts(x.shape().to_vec(), data), xhat, inv, batch)
        };
        let batch_stats = batch.is_some();
        let var = self.tape.push(
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std: inv,
                batch_stats,
            },
        );
        Ok((var, batch))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Self> {
        self.same_tape(gamma, "layer_norm")?;
        self.same_tape(beta, "layer_norm")?;
        let (out, xhat, inv) = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            let c = kernels::check_channel_vec("layer_norm", x.shape(), g.shape())?;
            kernels::check_channel_vec("layer_norm", x.shape(), b.shape())?;
            let (xhat, inv) = kernels::ln_normalize(&x);
            let (gd, bd) = (g.data(), b.data());
            let data = xhat.iter().enumerate().map(|(i, &v)| gd[i % c] * v + bd[i % c]).collect();
            (Tensor::from_parts(x.shape().to_vec(), data), xhat, inv)
        };
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std: inv,
            },
        ))
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat(self, other: Var<'t, T>) -> Result<Self> {
        self.same_tape(other, "concat")?;
        let out = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
                return Err(Error::shape(
                    "concat",
                    format!("{sa:?} and {sb:?} differ outside the channel axis"),
                ));
            }
            kernels::concat_last(&a, &b)
        };
        Ok(self.tape.push(out, Op::Concat(self.id, other.id)))
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice(self, start: usize, len: usize) -> Result<Self> {
        let out = {
            let x = self.value();
            let c = *x.shape().last().unwrap_or(&0);
            if len == 0 || start + len > c {
                return Err(Error::shape(
                    "slice",
                    format!("channels {start}..{} out of range for {:?}", start + len, x.shape()),
                ));
            }
            kernels::slice_last(&x, start, len)
        };
        Ok(self.tape.push(out, Op::Slice { x: self.id, start }))
    }

    /// Splits the channel axis into two equal halves.
    pub fn split_half(self) -> Result<(Self, Self)> {
        let c = *self.shape().last().unwrap_or(&0);
        if c % 2 != 0 {
            return Err(Error::shape("split", format!("odd channel count {c}")));
        }
        Ok((self.slice(0, c / 2)?, self.slice(c / 2, c / 2)?))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.value().reshaped(shape).map_err(|_| {
            Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape()))
        })?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let out = {
            let x = self.value();
            let shape = kernels::permute_check(x.shape(), perm)?;
            kernels::permute_fwd(&x, perm, &shape)
        };
        Ok(self.tape.push(
            out,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(self, axis: usize) -> Result<Self> {
        let out = {
            let x = self.value();
            if axis >= x.ndim() {
                return Err(Error::shape("flip", format!("axis {axis} of {:?}", x.shape())));
            }
            kernels::flip_fwd(&x, axis)
        };
        Ok(self.tape.push(out, Op::Flip { x: self.id, axis }))
    }

    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Self {
        let v = {
            let x = self.value();
            Tensor::scalar(x.sum() / T::from_usize_lossy(x.numel()))
        };
        self.tape.push(v, Op::MeanAll(self.id))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        let s = self.shape();
        if axis < s.len() {
            Ok(())
        } else {
            Err(Error::shape(op, format!("axis {axis} of {s:?}")))
        }
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        self.check_axis("sum_axis", axis)?;
        let v = kernels::sum_axis_fwd(&self.value(), axis);
        Ok(self.tape.push(v, Op::SumAxis { x: self.id, axis }))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Self> {
        self.check_axis("mean_axis", axis)?;
        let v = {
            let x = self.value();
            let n = T::from_usize_lossy(x.shape()[axis]);
            kernels::sum_axis_fwd(&x, axis).map(|s| s / n)
        };
        Ok(self.tape.push(v, Op::MeanAxis { x: self.id, axis }))
    }

    /// Global average pool: `[B, H, W, C]` or `[B, L, C]` to `[B, C]`.
    pub fn global_avg_pool(self) -> Result<Self> {
        let s = self.shape();
        match s.len() {
            3 => self.mean_axis(1),
            4 => self.reshape(&[s[0], s[1] * s[2], s[3]])?.mean_axis(1),
            _ => Err(Error::shape("global_avg_pool", format!("unsupported input {s:?}"))),
        }
    }

    /// Nearest-neighbour upsampling of a `[B, H, W, C]` map.
    pub fn upsample_nearest(self, factor: usize) -> Result<Self> {
        let out = {
            let x = self.value();
            if x.ndim() != 4 || factor == 0 {
                return Err(Error::shape(
                    "upsample_nearest",
                    format!("expected [B, H, W, C] and factor > 0, got {:?} x{factor}", x.shape()),
                ));
            }
            kernels::upsample_fwd(&x, factor)
        };
        Ok(self.tape.push(out, Op::Upsample { x: self.id, factor }))
    }
}

fn node_backward<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |id: usize| &nodes[id].value;
    let need = |id: usize| nodes[id].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b, inner) | Op::Sub(a, b, inner) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            out.push((*a, g.clone()));
            if need(*b) {
                let gb = kernels::reduce_broadcast(g.data(), *inner, val(*b).shape());
                out.push((*b, scale_tensor(&gb, sign)));
            }
        }
        Op::Mul(a, b, inner) => {
            let (av, bv) = (val(*a), val(*b));
            if need(*a) {
                let bd = bv.data();
                let data = g.data().iter().enumerate().map(|(i, &gv)| gv * bd[i / inner]).collect();
                out.push((*a, Tensor::from_parts(av.shape().to_vec(), data)));
            }
            if need(*b) {
                let prod: Vec<T> = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                out.push((*b, kernels::reduce_broadcast(&prod, *inner, bv.shape())));
            }
        }
        Op::Scale(x, s) => out.push((*x, scale_tensor(g, *s))),
        Op::AddScalar(x) | Op::Reshape(x) => {
            out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec())))
        }
        Op::AddChannel(x, v) | Op::MulChannel(x, v) => {
            let is_mul = matches!(node.op, Op::MulChannel(..));
            let (xv, vv) = (val(*x), val(*v));
            let c = vv.numel();
            if need(*x) {
                let gx = if is_mul {
                    let vd = vv.data();
                    let data = g.data().iter().enumerate().map(|(i, &gv)| gv * vd[i % c]).collect();
                    Tensor::from_parts(xv.shape().to_vec(), data)
                } else {
                    g.clone()
                };
                out.push((*x, gx));
            }
            if need(*v) {
                let mut gv = vec![T::zero(); c];
                for (i, &gg) in g.data().iter().enumerate() {
                    gv[i % c] += if is_mul { gg * xv.data()[i] } else { gg };
                }
                out.push((*v, Tensor::from_parts(vec![c], gv)));
            }
        }
        Op::Linear { x, w, b } => {
            let (gx, gw, gb) = kernels::linear_bwd(
                val(*x),
                val(*w),
                g,
                need(*x),
                need(*w),
                b.is_some_and(&need),
            );
            out.extend(gx.map(|t| (*x, t)));
            out.extend(gw.map(|t| (*w, t)));
            if let (Some(b), Some(t)) = (b, gb) {
                out.push((*b, t));
            }
        }
        Op::Unary(x, kind) => {
            let (xv, yv) = (val(*x), &node.value);
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(&gv, (&a, &y))| gv * kind.derivative(a, y))
                .collect();
            out.push((*x, Tensor::from_parts(xv.shape().to_vec(), data)));
        }
        Op::LogSoftmax(x) => out.push((*x, kernels::log_softmax_bwd(&node.value, g))),
        Op::DepthwiseConv1d { x, w, causal } => {
            let (gx, gw) = kernels::dwconv1d_bwd(val(*x), val(*w), g, *causal);
            out.push((*x, gx));
            out.push((*w, gw));
        }
        Op::Conv1d { x, w } => {
            let (gx, gw) = kernels::conv1d_bwd(val(*x), val(*w), g);
            out.push((*x, gx));
            out.push((*w, gw));
        }
        Op::DepthwiseConv2d { x, w } => {
            let (gx, gw) = kernels::dwconv2d_bwd(val(*x), val(*w), g);
            out.push((*x, gx));
            out.push((*w, gw));
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (gx, gw) = kernels::conv2d_bwd(val(*x), val(*w), g, *stride, *pad);
            out.push((*x, gx));
            out.push((*w, gw));
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let gam = val(*gamma).data();
            let c = gam.len();
            if need(*x) {
                let dx = if *batch_stats {
                    kernels::bn_train_bwd(xhat, inv_std, gam, g.data())
                } else {
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * gam[i % c] * inv_std[i % c])
                        .collect()
                };
                out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)));
            }
            let (dg, db) = kernels::affine_bwd(xhat, g.data(), c);
            out.push((*gamma, Tensor::from_parts(vec![c], dg)));
            out.push((*beta, Tensor::from_parts(vec![c], db)));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gam = val(*gamma).data();
            let c = gam.len();
            if need(*x) {
                let dx = kernels::ln_bwd(xhat, inv_std, gam, g.data());
                out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), dx)));
            }
            let (dg, db) = kernels::affine_bwd(xhat, g.data(), c);
            out.push((*gamma, Tensor::from_parts(vec![c], dg)));
            out.push((*beta, Tensor::from_parts(vec![c], db)));
        }
        Op::Concat(a, b) => {
            let ca = *val(*a).shape().last().expect("nonempty");
            let cb = *val(*b).shape().last().expect("nonempty");
            out.push((*a, kernels::slice_last(g, 0, ca)));
            out.push((*b, kernels::slice_last(g, ca, cb)));
        }
        Op::Slice { x, start } => {
            let xv = val(*x);
            let c = *xv.shape().last().expect("nonempty");
            let len = *g.shape().last().expect("nonempty");
            let mut dx = vec![T::zero(); xv.numel()];
            for (dr, gr) in dx.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                dr[*start..start + len].copy_from_slice(gr);
            }
            out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
        }
        Op::Permute { x, perm } => {
            let inv = kernels::inverse_perm(perm);
            out.push((*x, kernels::permute_fwd(g, &inv, val(*x).shape())));
        }
        Op::Flip { x, axis } => out.push((*x, kernels::flip_fwd(g, *axis))),
        Op::SumAll(x) | Op::MeanAll(x) => {
            let xv = val(*x);
            let mut gv = g.item();
            if matches!(node.op, Op::MeanAll(_)) {
                gv /= T::from_usize_lossy(xv.numel());
            }
            out.push((*x, Tensor::full(xv.shape(), gv)));
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            let shape = val(*x).shape();
            let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                T::one() / T::from_usize_lossy(shape[*axis])
            } else {
                T::one()
            };
            out.push((*x, kernels::expand_axis(g, shape, *axis, scale)));
        }
        Op::Upsample { x, factor } => {
            out.push((*x, kernels::upsample_bwd(g, val(*x).shape(), *factor)));
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let gs = op.backward(&ins, &node.value, g)?;
            if gs.len() != inputs.len() {
                return Err(Error::Tape(format!(
                    "{}: backward returned {} gradients for {} inputs",
                    op.name(),
                    gs.len(),
                    inputs.len()
                )));
            }
            out.extend(inputs.iter().copied().zip(gs));
        }
    }
    Ok(out)
}
