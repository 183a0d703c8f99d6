//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables during a
//! forward pass. [`Graph::backward`] walks the tape in reverse once and
//! returns the gradients of all leaves created with [`Graph::leaf`]. The
//! tape is single-use: after `backward` the graph is stale until
//! [`Graph::reset`].
//!
//! Operations only record backward information when at least one input
//! requires a gradient, so inference through constant parameters costs no
//! more than a plain forward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, ConvShape, Trilinear};
use crate::math;
use crate::tensor::{numel_of, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Neg(Var),
    Abs(Var),
    Square(Var),
    Log(Var),
    Exp(Var),
    Softplus(Var),
    Act(Var, Activation),
    Softmax(Var, usize),
    Sum(Var),
    Mean(Var),
    Extremum(Var, usize),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv3d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    BiasAdd(Var, Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Trilinear(Var, Trilinear),
    Nearest(Var, usize),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        /// Row-stochastic `[N, M]` attention weights.
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by leaf variable.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` for constants and leaves the loss does not
    /// reach.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        })
    }
}

/// Reduces an upstream gradient onto an operand that may have been
/// broadcast from a single element.
fn unbroadcast(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        grad
    } else {
        Tensor::full(target.shape(), grad.sum())
    }
}

fn softmax_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears the tape so the graph can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self) -> Result<()> {
        if self.consumed {
            Err(Error::StaleGraph)
        } else {
            Ok(())
        }
    }

    /// A differentiable input whose gradient is reported by `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; never accumulates a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Copies a value into the graph as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        record: Op,
    ) -> Result<Var> {
        self.check()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, ta, tb)?;
        let n = numel_of(&shape);
        let (da, db) = (ta.data(), tb.data());
        let ia = |i: usize| if da.len() == 1 { 0 } else { i };
        let ib = |i: usize| if db.len() == 1 { 0 } else { i };
        let data = (0..n).map(|i| f(da[ia(i)], db[ib(i)])).collect();
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, record, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, record: Op) -> Result<Var> {
        self.check()?;
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        Ok(self.push(out, record, rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, math::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: alloc::format!("non-positive input {bad}"),
            });
        }
        self.unary(a, math::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, math::exp, Op::Exp(a))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, math::softplus, Op::Softplus(a))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let f = move |x: f64| match kind {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Tanh => math::tanh(x),
            Activation::Sigmoid => math::sigmoid(x),
        };
        self.unary(a, f, Op::Act(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.activation(a, Activation::LeakyRelu(alpha))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    /// Softmax normalized along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check()?;
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::Rank {
                op: "softmax",
                expected: axis + 1,
                found: t.rank(),
            });
        }
        let (outer, len, inner) = softmax_strides(t.shape(), axis);
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = math::exp(x[at(j)] - m);
                    y[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    y[at(j)] /= s;
                }
            }
        }
        let out = Tensor::new(t.shape(), y)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check()?;
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check()?;
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    fn extremum(&mut self, a: Var, want_max: bool) -> Result<Var> {
        self.check()?;
        let data = self.value(a).data();
        if data.is_empty() {
            return Err(crate::error::invalid("reduction over an empty tensor"));
        }
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            if (want_max && v > data[best]) || (!want_max && v < data[best]) {
                best = i;
            }
        }
        let out = Tensor::scalar(data[best]);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Extremum(a, best), rg))
    }

    /// Largest element; the gradient flows to its first occurrence.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        self.extremum(a, true)
    }

    /// Smallest element; the gradient flows to its first occurrence.
    pub fn min(&mut self, a: Var) -> Result<Var> {
        self.extremum(a, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check()?;
        let (ta, tb) = (self.value(a), self.value(b));
        ta.expect_rank(2, "matmul")?;
        tb.expect_rank(2, "matmul")?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                found: tb.shape().to_vec(),
            });
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut c, n, false);
        let out = Tensor::new(&[m, n], c)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    /// Dot-product attention over columns: with `q: [c_k, N]`, `k: [c_k, M]`
    /// and `v: [c_v, M]`, column `n` of the `[c_v, N]` result is
    /// `Σ_m softmax_m(q_nᵀ k_m) v_m`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        self.check()?;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        for t in [tq, tk, tv] {
            t.expect_rank(2, "attention")?;
        }
        let (ck, n) = (tq.shape()[0], tq.shape()[1]);
        let m = tk.shape()[1];
        let cv = tv.shape()[0];
        if tk.shape()[0] != ck || tv.shape()[1] != m {
            return Err(Error::ShapeMismatch {
                op: "attention",
                expected: vec![ck, m],
                found: [tk.shape(), tv.shape()].concat(),
            });
        }
        let mut w = vec![0.0; n * m];
        kernels::gemm(n, ck, m, tq.data(), true, tk.data(), false, &mut w, m, false);
        for row in w.chunks_mut(m) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = math::exp(*x - mx);
                sum += *x;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let mut out = vec![0.0; cv * n];
        kernels::gemm(cv, m, n, tv.data(), false, &w, true, &mut out, n, false);
        let out = Tensor::new(&[cv, n], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, weights: w }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check()?;
        let t = self.value(a);
        t.expect_rank(2, "transpose")?;
        let out = transpose2(t);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check()?;
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Cross-correlation of a `[C_in, D, H, W]` input with a
    /// `[C_out, C_in, kd, kh, kw]` kernel.
    pub fn conv3d(&mut self, input: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        self.check()?;
        let shape = self.conv_shape(input, kernel, geom)?;
        let out = kernels::conv3d_forward(self.value(input).data(), self.value(kernel).data(), &shape);
        let [d, h, w] = shape.output;
        let out = Tensor::new(&[shape.c_out, d, h, w], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    fn conv_shape(&self, input: Var, kernel: Var, geom: ConvGeometry) -> Result<ConvShape> {
        let [c_in, d, h, w] = self.value(input).dims4("conv3d")?;
        let k = self.value(kernel);
        k.expect_rank(5, "conv3d kernel")?;
        let ks = k.shape();
        if ks[1] != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                expected: vec![ks[0], c_in, ks[2], ks[3], ks[4]],
                found: ks.to_vec(),
            });
        }
        let kernel_ext = [ks[2], ks[3], ks[4]];
        let output = geom.output_extents([d, h, w], kernel_ext)?;
        Ok(ConvShape {
            c_in,
            input: [d, h, w],
            c_out: ks[0],
            kernel: kernel_ext,
            output,
            geom,
        })
    }

    /// Adds a per-channel bias `[C]` to a `[C, ...]` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check()?;
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.shape().first().copied().unwrap_or(0);
        tb.expect_shape(&[c], "bias_add")?;
        let n = tx.numel() / c.max(1);
        let mut out = tx.clone();
        for (ci, chunk) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            let b = tb.data()[ci];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::BiasAdd(x, bias), rg))
    }

    /// Per-channel standardization of `[C, ...]` followed by scale and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check()?;
        let tx = self.value(x);
        if tx.rank() < 2 || tx.numel() == 0 {
            return Err(Error::Rank {
                op: "instance_norm",
                expected: 2,
                found: tx.rank(),
            });
        }
        let c = tx.shape()[0];
        self.value(gamma).expect_shape(&[c], "instance_norm gamma")?;
        self.value(beta).expect_shape(&[c], "instance_norm beta")?;
        let (y, xhat, inv_std) = kernels::instance_norm_forward(
            tx.data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let out = Tensor::new(tx.shape(), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `[C, D, H, W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check()?;
        let [c, d, h, w] = self.value(x).dims4("global_avg_pool")?;
        let n = d * h * w;
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|ch| ch.iter().sum::<f64>() / n as f64)
            .collect();
        let out = Tensor::new(&[c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// Max pooling over non-overlapping `factor³` windows.
    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check()?;
        let dims = self.value(x).dims4("max_pool")?;
        if factor == 0 || dims[1..].iter().any(|&e| e % factor != 0) {
            return Err(Error::Domain {
                op: "max_pool",
                detail: alloc::format!("extents {:?} not divisible by {factor}", &dims[1..]),
            });
        }
        let (data, argmax) = kernels::max_pool(self.value(x).data(), dims, factor);
        let out = Tensor::new(
            &[dims[0], dims[1] / factor, dims[2] / factor, dims[3] / factor],
            data,
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Align-corners trilinear resampling to a larger or equal grid.
    pub fn upsample_trilinear(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        self.check()?;
        let [c, d, h, w] = self.value(x).dims4("upsample_trilinear")?;
        let src = [d, h, w];
        if (0..3).any(|i| target[i] < src[i] || src[i] == 0) {
            return Err(Error::Domain {
                op: "upsample_trilinear",
                detail: alloc::format!("target {target:?} smaller than source {src:?}"),
            });
        }
        let interp = Trilinear::new(src, target);
        let data = interp.forward(self.value(x).data(), c);
        let out = Tensor::new(&[c, target[0], target[1], target[2]], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Trilinear(x, interp), rg))
    }

    /// Nearest-neighbour upsampling by an integer factor on every axis.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check()?;
        let dims = self.value(x).dims4("upsample_nearest")?;
        let data = kernels::upsample_nearest(self.value(x).data(), dims, factor);
        let out = Tensor::new(
            &[dims[0], dims[1] * factor, dims[2] * factor, dims[3] * factor],
            data,
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Nearest(x, factor), rg))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.check()?;
        let first = self.value(parts[0]).shape().to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != first.len() || t.shape()[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    expected: first,
                    found: t.shape().to_vec(),
                });
            }
            channels += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = channels;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + len` of a `[C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check()?;
        let t = self.value(x);
        let c = t.shape().first().copied().unwrap_or(0);
        if start + len > c || len == 0 {
            return Err(crate::error::invalid(alloc::format!(
                "slice_channels: {start}..{} out of {c} channels",
                start + len
            )));
        }
        let n = t.numel() / c;
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceChannels(x, start), rg))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check()?;
        let shape = self.value(loss).shape().to_vec();
        if numel_of(&shape) != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(&shape));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        // Only leaves keep their gradients; intermediates were taken above.
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*b) {
                    let gb = unbroadcast(g.clone(), self.value(*b));
                    self.accumulate(grads, *b, gb)?;
                }
                let ga = unbroadcast(g, self.value(*a));
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    let gb = unbroadcast(g.scale(-1.0), self.value(*b));
                    self.accumulate(grads, *b, gb)?;
                }
                let ga = unbroadcast(g, self.value(*a));
                self.accumulate(grads, *a, ga)?;
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                let ia = |k: usize| if da.len() == 1 { 0 } else { k };
                let ib = |k: usize| if db.len() == 1 { 0 } else { k };
                if self.wants(*a) {
                    let full = Tensor::from_fn(out.shape(), |k| {
                        if is_div {
                            g.data()[k] / db[ib(k)]
                        } else {
                            g.data()[k] * db[ib(k)]
                        }
                    });
                    self.accumulate(grads, *a, unbroadcast(full, ta))?;
                }
                if self.wants(*b) {
                    let full = Tensor::from_fn(out.shape(), |k| {
                        if is_div {
                            let y = db[ib(k)];
                            -g.data()[k] * da[ia(k)] / (y * y)
                        } else {
                            g.data()[k] * da[ia(k)]
                        }
                    });
                    self.accumulate(grads, *b, unbroadcast(full, tb))?;
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g)?,
            Op::MulScalar(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::Neg(a) => self.accumulate(grads, *a, g.scale(-1.0))?,
            Op::Abs(a) => {
                let gx = g.zip_map(self.value(*a), |gi, x| gi * math::signum(x))?;
                self.accumulate(grads, *a, gx)?;
            }
            Op::Square(a) => {
                let gx = g.zip_map(self.value(*a), |gi, x| 2.0 * gi * x)?;
                self.accumulate(grads, *a, gx)?;
            }
            Op::Log(a) => {
                let gx = g.zip_map(self.value(*a), |gi, x| gi / x)?;
                self.accumulate(grads, *a, gx)?;
            }
            Op::Exp(a) => {
                let gx = g.zip_map(out, |gi, y| gi * y)?;
                self.accumulate(grads, *a, gx)?;
            }
            Op::Softplus(a) => {
                let gx = g.zip_map(self.value(*a), |gi, x| gi * math::sigmoid(x))?;
                self.accumulate(grads, *a, gx)?;
            }
            Op::Act(a, kind) => {
                let x = self.value(*a);
                let gx = match *kind {
                    Activation::Relu => g.zip_map(x, |gi, x| if x > 0.0 { gi } else { 0.0 })?,
                    Activation::LeakyRelu(alpha) => {
                        g.zip_map(x, |gi, x| if x > 0.0 { gi } else { alpha * gi })?
                    }
                    Activation::Tanh => g.zip_map(out, |gi, y| gi * (1.0 - y * y))?,
                    Activation::Sigmoid => g.zip_map(out, |gi, y| gi * y * (1.0 - y))?,
                };
                self.accumulate(grads, *a, gx)?;
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = softmax_strides(out.shape(), *axis);
                let (y, gy) = (out.data(), g.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + k;
                        let dot: f64 = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape(), gx)?)?;
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                let gx = Tensor::full(self.value(*a).shape(), gs);
                self.accumulate(grads, *a, gx)?;
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gx = Tensor::full(x.shape(), g.data()[0] / x.numel() as f64);
                self.accumulate(grads, *a, gx)?;
            }
            Op::Extremum(a, idx) => {
                let mut gx = Tensor::zeros(self.value(*a).shape());
                gx.data_mut()[*idx] = g.data()[0];
                self.accumulate(grads, *a, gx)?;
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, k, false);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga)?)?;
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, n, false);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb)?)?;
                }
            }
            Op::Attention { q, k, v, weights } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (ck, n, m, cv) = (tq.shape()[0], tq.shape()[1], tk.shape()[1], tv.shape()[0]);
                if self.wants(*v) {
                    let mut gv = vec![0.0; cv * m];
                    kernels::gemm(cv, n, m, g.data(), false, weights, false, &mut gv, m, false);
                    self.accumulate(grads, *v, Tensor::new(&[cv, m], gv)?)?;
                }
                if self.wants(*q) || self.wants(*k) {
                    // dL = W ⊙ (dW − rowsum(dW ⊙ W)), dW = gᵀ v.
                    let mut dl = vec![0.0; n * m];
                    kernels::gemm(n, cv, m, g.data(), true, tv.data(), false, &mut dl, m, false);
                    for (row, wrow) in dl.chunks_mut(m).zip(weights.chunks(m)) {
                        let dot: f64 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        for (x, &w) in row.iter_mut().zip(wrow) {
                            *x = w * (*x - dot);
                        }
                    }
                    if self.wants(*q) {
                        let mut gq = vec![0.0; ck * n];
                        kernels::gemm(ck, m, n, tk.data(), false, &dl, true, &mut gq, n, false);
                        self.accumulate(grads, *q, Tensor::new(&[ck, n], gq)?)?;
                    }
                    if self.wants(*k) {
                        let mut gk = vec![0.0; ck * m];
                        kernels::gemm(ck, n, m, tq.data(), false, &dl, false, &mut gk, m, false);
                        self.accumulate(grads, *k, Tensor::new(&[ck, m], gk)?)?;
                    }
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose2(&g))?,
            Op::Reshape(a) => {
                let gx = g.reshape(self.value(*a).shape())?;
                self.accumulate(grads, *a, gx)?;
            }
            Op::Conv3d {
                input,
                kernel,
                geom,
            } => {
                let shape = self.conv_shape(*input, *kernel, *geom)?;
                let (dx, dk) = kernels::conv3d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g.data(),
                    &shape,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                if let Some(dx) = dx {
                    let gx = Tensor::new(self.value(*input).shape(), dx)?;
                    self.accumulate(grads, *input, gx)?;
                }
                if let Some(dk) = dk {
                    let gk = Tensor::new(self.value(*kernel).shape(), dk)?;
                    self.accumulate(grads, *kernel, gk)?;
                }
            }
            Op::BiasAdd(x, b) => {
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let n = g.numel() / c.max(1);
                    let gb = g.data().chunks(n.max(1)).map(|ch| ch.iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor::new(&[c], gb)?)?;
                }
                self.accumulate(grads, *x, g)?;
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) = kernels::instance_norm_backward(
                    g.data(),
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                );
                let c = inv_std.len();
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?)?;
                self.accumulate(grads, *x, Tensor::new(out.shape(), dx)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let n = xs[1] * xs[2] * xs[3];
                let gx = Tensor::from_fn(xs, |k| g.data()[k / n] / n as f64);
                self.accumulate(grads, *x, gx)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (&src, &gi) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gi;
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Trilinear(x, interp) => {
                let xs = self.value(*x).shape();
                let gx = Tensor::new(xs, interp.backward(g.data(), xs[0]))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Nearest(x, factor) => {
                let dims = self.value(*x).dims4("upsample_nearest")?;
                let gx = kernels::upsample_nearest_backward(g.data(), dims, *factor);
                self.accumulate(grads, *x, Tensor::new(&dims, gx)?)?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        let gp = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(self.value(p).shape(), gp)?)?;
                    }
                    offset += len;
                }
            }
            Op::SliceChannels(x, start) => {
                let xs = self.value(*x);
                let n = xs.numel() / xs.shape()[0];
                let mut gx = Tensor::zeros(xs.shape());
                gx.data_mut()[start * n..start * n + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).expect("transpose preserves element count")
}
