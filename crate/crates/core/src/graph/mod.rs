//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value plus whatever the backward rule needs. Node order is construction
//! order, which is a valid topological order, so [`Graph::backward`] is a
//! single reverse sweep. A graph lives for one training step and is confined
//! to one thread; the tensors moving in and out of it are plain values.

mod batchnorm;
mod conv;
pub(crate) mod kernels;
#[cfg(test)]
mod tests;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Neg(Var),
    Abs(Var),
    Square(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    /// Elementwise product with a constant mask (dropout noise).
    MulMask(Var, Tensor<T>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    Downsample2x(Var),
    GlobalAvgPool(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf value. Gradients accumulate on it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, needs, op)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            let dim = sa
                .iter()
                .zip(sb.iter())
                .position(|(x, y)| x != y)
                .map(|d| format!(" (dim {d}: {} != {})", sa[d], sb[d]))
                .unwrap_or_default();
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("lhs {sa:?} vs rhs {sb:?}{dim}"),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = zip_new(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push_op(data, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_new(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push_op(data, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_new(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push_op(data, &[a, b], Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push_op(out, &[a], Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push_op(out, &[a], Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push_op(out, &[a], Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push_op(out, &[a], Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push_op(out, &[a], Op::Square(a))
    }

    /// `max(x, slope*x)`; the subgradient at 0 is taken as `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let zero = T::zero();
        let one = T::one();
        if slope < zero || slope >= one {
            return Err(Error::InvalidArg(format!(
                "leaky_relu slope must be in [0,1), got {slope}"
            )));
        }
        let out = self.value(a).map(|x| x.max(slope * x));
        Ok(self.push_op(out, &[a], Op::LeakyRelu(a, slope)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push_op(out, &[a], Op::Tanh(a))
    }

    /// Multiplicative Bernoulli noise with inverted-dropout scaling, applied
    /// whenever called (training and inference alike; callers gate on the
    /// configured noise mode). `rate` 0 is an exact no-op.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArg(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let mask_data: Vec<T> = (0..self.value(a).numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let mask = Tensor::from_vec(self.value(a).shape().to_vec(), mask_data)?;
        let out = zip_new(self.value(a), &mask, |x, m| x * m);
        Ok(self.push_op(out, &[a], Op::MulMask(a, mask)))
    }

    // ---- reductions and shape ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push_op(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_f64(t.numel() as f64);
        self.push_op(Tensor::scalar(m), &[a], Op::Mean(a))
    }

    /// Sum of absolute values (L1 norm).
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let abs = self.abs(a);
        self.sum(abs)
    }

    /// Sum of squares (squared L2 norm).
    pub fn l2_norm_sq(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.sum(sq)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push_op(out, &[a], Op::Reshape(a)))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArg("concat_channels needs at least one input".into()));
        }
        let (n0, _, h0, w0) = self.value(inputs[0]).dims4()?;
        let mut c_total = 0;
        for &v in inputs {
            let (n, c, h, w) = self.value(v).dims4()?;
            if (n, h, w) != (n0, h0, w0) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!(
                        "expected batch/spatial [{n0}, _, {h0}, {w0}], got {:?}",
                        self.value(v).shape()
                    ),
                });
            }
            c_total += c;
        }
        let mut data = vec![T::zero(); n0 * c_total * h0 * w0];
        let plane = h0 * w0;
        for ni in 0..n0 {
            let mut c_off = 0;
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                let src = &t.data()[ni * c * plane..(ni + 1) * c * plane];
                let dst_start = (ni * c_total + c_off) * plane;
                data[dst_start..dst_start + c * plane].copy_from_slice(src);
                c_off += c;
            }
        }
        let out = Tensor::from_vec(vec![n0, c_total, h0, w0], data)?;
        Ok(self.push_op(out, inputs, Op::ConcatChannels(inputs.to_vec())))
    }

    /// Nearest-neighbor 2x spatial downsample (keeps the top-left sample of
    /// each 2x2 block).
    pub fn downsample2x(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "downsample2x",
                detail: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    data[(nc * oh + y) * ow + x] = src[(nc * h + 2 * y) * w + 2 * x];
                }
            }
        }
        let out = Tensor::from_vec(vec![n, c, oh, ow], data)?;
        Ok(self.push_op(out, &[a], Op::Downsample2x(a)))
    }

    /// Mean over spatial dims: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let src = self.value(a).data();
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut data = vec![T::zero(); n * c];
        for (nc, d) in data.iter_mut().enumerate() {
            let mut s = T::zero();
            for &v in &src[nc * h * w..(nc + 1) * h * w] {
                s += v;
            }
            *d = s * inv;
        }
        let out = Tensor::from_vec(vec![n, c, 1, 1], data)?;
        Ok(self.push_op(out, &[a], Op::GlobalAvgPool(a)))
    }

    // ---- neural ops (separate modules) ----

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        conv::forward(self, input, weight, bias, stride, padding)
    }

    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        conv::forward_transpose(self, input, weight, bias, stride, padding)
    }

    /// Batch normalization over the channel axis of an NCHW tensor.
    ///
    /// Train mode normalizes with batch statistics and folds them into the
    /// running buffers with the given momentum; eval mode normalizes with the
    /// running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        train: bool,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        batchnorm::forward(self, input, gamma, beta, running_mean, running_var, train, momentum, eps)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`. Per-node gradients from this pass
    /// are added into any gradients left by previous passes, so calling twice
    /// without clearing doubles leaf gradients exactly.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut pass: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        pass[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                pass[i] = None;
                continue;
            }
            let Some(gout) = pass[i].take() else { continue };
            let contribs = self.backward_node(i, &gout)?;
            for (var, delta) in contribs {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut pass[var.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a += *d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            }
            // Persist this pass's gradient on the node itself.
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(gout.data()) {
                        *a += *d;
                    }
                }
                slot => *slot = Some(gout),
            }
        }
        // Leaves below the loss index were handled above; leaves never enter
        // backward_node, so persist any remaining pass gradients (none left:
        // leaves are covered by the loop since their index < loss index).
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs.
    fn backward_node(&self, i: usize, gout: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Tensor<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gout.clone()));
                out.push((*b, gout.map(|g| -g)));
            }
            Op::Mul(a, b) => {
                out.push((*a, zip_new(gout, self.value(*b), |g, y| g * y)));
                out.push((*b, zip_new(gout, self.value(*a), |g, x| g * x)));
            }
            Op::AddScalar(a) => out.push((*a, gout.clone())),
            Op::MulScalar(a, c) => {
                let c = *c;
                out.push((*a, gout.map(|g| g * c)));
            }
            Op::Neg(a) => out.push((*a, gout.map(|g| -g))),
            Op::Abs(a) => {
                let sign = |x: T| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                out.push((*a, zip_new(gout, self.value(*a), |g, x| g * sign(x))));
            }
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                out.push((*a, zip_new(gout, self.value(*a), |g, x| g * two * x)));
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                out.push((
                    *a,
                    zip_new(gout, self.value(*a), |g, x| if x > T::zero() { g } else { g * s }),
                ));
            }
            Op::Tanh(a) => {
                out.push((*a, zip_new(gout, &node.value, |g, y| g * (T::one() - y * y))));
            }
            Op::MulMask(a, mask) => {
                out.push((*a, zip_new(gout, mask, |g, m| g * m)));
            }
            Op::Sum(a) => {
                let g = gout.item();
                out.push((*a, Tensor::full(self.value(*a).shape(), g)));
            }
            Op::Mean(a) => {
                let numel = self.value(*a).numel();
                let g = gout.item() / T::from_f64(numel as f64);
                out.push((*a, Tensor::full(self.value(*a).shape(), g)));
            }
            Op::Reshape(a) => {
                out.push((*a, gout.reshape(self.value(*a).shape())?));
            }
            Op::ConcatChannels(inputs) => {
                let (n, c_total, h, w) = node.value.dims4()?;
                let plane = h * w;
                let g = gout.data();
                let mut c_off = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    let mut data = vec![T::zero(); n * c * plane];
                    for ni in 0..n {
                        let src_start = (ni * c_total + c_off) * plane;
                        data[ni * c * plane..(ni + 1) * c * plane]
                            .copy_from_slice(&g[src_start..src_start + c * plane]);
                    }
                    out.push((v, Tensor::from_vec(vec![n, c, h, w], data)?));
                    c_off += c;
                }
            }
            Op::Downsample2x(a) => {
                let (n, c, h, w) = self.value(*a).dims4()?;
                let (oh, ow) = (h / 2, w / 2);
                let g = gout.data();
                let mut data = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..oh {
                        for x in 0..ow {
                            data[(nc * h + 2 * y) * w + 2 * x] = g[(nc * oh + y) * ow + x];
                        }
                    }
                }
                out.push((*a, Tensor::from_vec(vec![n, c, h, w], data)?));
            }
            Op::GlobalAvgPool(a) => {
                let (n, c, h, w) = self.value(*a).dims4()?;
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let g = gout.data();
                let mut data = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let gv = g[nc] * inv;
                    data[nc * h * w..(nc + 1) * h * w].fill(gv);
                }
                out.push((*a, Tensor::from_vec(vec![n, c, h, w], data)?));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                conv::backward(
                    self,
                    gout,
                    *input,
                    *weight,
                    *bias,
                    *stride,
                    *padding,
                    &mut out,
                )?;
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                conv::backward_transpose(
                    self,
                    gout,
                    *input,
                    *weight,
                    *bias,
                    *stride,
                    *padding,
                    &mut out,
                )?;
            }
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                batchnorm::backward(self, gout, *input, *gamma, *beta, mean, inv_std, *train, &mut out)?;
            }
        }
        Ok(out)
    }
}

fn zip_new<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("shapes checked")
}
