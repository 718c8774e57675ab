//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! parents already sit earlier on the tape, so reverse index order is a
//! reverse topological order and the backward pass visits each node exactly
//! once. Gradients accumulate additively over fan-out.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};
use rand::Rng;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Abs(Var),
    AddScalar(Var, T),
    MulScalar(Var, T),
    PowConst(Var, T),
    ClampMin(Var, T),
    ConcatChannels(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    AvgPool2(Var),
    /// x * s with s shaped (b, c, 1, 1), broadcast over spatial positions.
    MulChannelwise {
        x: Var,
        s: Var,
    },
    Sum(Var),
    Mean(Var),
    /// Quantizer output; backward is the straight-through identity.
    Binarize(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a var, or zeros of the given shape when the var was
    /// unreachable from the loss.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 4]) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor value of a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite values produced on the tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node. `requires_grad` marks trainable parameters (and inputs
    /// under gradient check).
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let value = tensor::conv2d(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
            stride,
            pad,
        )?;
        let req =
            self.requires(x) || self.requires(w) || b.map_or(false, |bv| self.requires(bv));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, req))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = tensor::pixel_shuffle(self.value(x), r)?;
        let req = self.requires(x);
        Ok(self.push(value, Op::PixelShuffle { x, r }, req))
    }

    fn binary_pointwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, op, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_pointwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_pointwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_pointwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_pointwise(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let req = self.requires(x);
        self.push(value, op, req)
    }

    /// sigmoid(x) = 1 / (1 + exp(-x)), computed in the numerically stable
    /// split form.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Var {
        self.unary(
            x,
            |v| if v >= T::zero() { v } else { alpha * v },
            Op::LeakyRelu(x, alpha),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, stable_softplus, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x, c))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    /// x^p for a fixed exponent; caller keeps x in the domain where the
    /// power is finite (positive base for fractional p).
    pub fn pow_const(&mut self, x: Var, p: T) -> Var {
        self.unary(x, |v| v.powf(p), Op::PowConst(x, p))
    }

    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape();
        let mut channels = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if [s[0], s[2], s[3]] != [first[0], first[2], first[3]] {
                return Err(Error::ShapeMismatch {
                    context: "concat_channels non-channel extents",
                    left: first,
                    right: s,
                });
            }
            channels += s[1];
        }
        let [b, _, h, w] = first;
        let mut out = Tensor::zeros([b, channels, h, w]);
        let plane = h * w;
        for bi in 0..b {
            let mut co = 0usize;
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                let src = t.index(bi, 0, 0, 0);
                let dst = out.index(bi, co, 0, 0);
                out.data_mut()[dst..dst + c * plane]
                    .copy_from_slice(&t.data()[src..src + c * plane]);
                co += c;
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), req))
    }

    /// Contiguous channel range [start, start + len).
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let [b, c, h, w] = t.shape();
        if len == 0 || start + len > c {
            return Err(Error::InvalidArgument(format!(
                "channel slice {}..{} outside 0..{}",
                start,
                start + len,
                c
            )));
        }
        let plane = h * w;
        let mut out = Tensor::zeros([b, len, h, w]);
        for bi in 0..b {
            let src = t.index(bi, start, 0, 0);
            let dst = out.index(bi, 0, 0, 0);
            out.data_mut()[dst..dst + len * plane]
                .copy_from_slice(&t.data()[src..src + len * plane]);
        }
        let req = self.requires(x);
        Ok(self.push(out, Op::SliceChannels { x, start }, req))
    }

    /// Mean over the spatial axes: (b, c, h, w) -> (b, c, 1, 1).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [b, c, h, w] = t.shape();
        let inv = T::one() / T::from_f64_lossy((h * w) as f64);
        let mut out = Tensor::zeros([b, c, 1, 1]);
        for bi in 0..b {
            for ci in 0..c {
                let base = t.index(bi, ci, 0, 0);
                let sum: T = t.data()[base..base + h * w].iter().copied().sum();
                out.set(bi, ci, 0, 0, sum * inv);
            }
        }
        let req = self.requires(x);
        self.push(out, Op::GlobalAvgPool(x), req)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let value = tensor::avg_pool2(self.value(x));
        let req = self.requires(x);
        self.push(value, Op::AvgPool2(x), req)
    }

    /// Per-channel scaling: x (b,c,h,w) * s (b,c,1,1).
    pub fn mul_channelwise(&mut self, x: Var, s: Var) -> Result<Var> {
        let xt = self.value(x);
        let st = self.value(s);
        let [b, c, h, w] = xt.shape();
        if st.shape() != [b, c, 1, 1] {
            return Err(Error::ShapeMismatch {
                context: "mul_channelwise scale",
                left: xt.shape(),
                right: st.shape(),
            });
        }
        let mut out = Tensor::zeros([b, c, h, w]);
        for bi in 0..b {
            for ci in 0..c {
                let k = st.at(bi, ci, 0, 0);
                let base = xt.index(bi, ci, 0, 0);
                for i in 0..h * w {
                    out.data_mut()[base + i] = xt.data()[base + i] * k;
                }
            }
        }
        let req = self.requires(x) || self.requires(s);
        Ok(self.push(out, Op::MulChannelwise { x, s }, req))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), req)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let v = s / T::from_f64_lossy(t.numel() as f64);
        let req = self.requires(x);
        self.push(Tensor::scalar(v), Op::Mean(x), req)
    }

    /// Deterministic binarizer: sign(z) in {-1, +1} (zero maps to +1).
    /// Backward is the straight-through identity.
    pub fn binarize_deterministic(&mut self, z: Var) -> Var {
        let value = self
            .value(z)
            .map(|v| if v >= T::zero() { T::one() } else { -T::one() });
        let req = self.requires(z);
        self.push(value, Op::Binarize(z), req)
    }

    /// Stochastic binarizer: +1 with probability (1+z)/2, else -1.
    /// Backward is the straight-through identity.
    pub fn binarize_stochastic<R: Rng>(&mut self, z: Var, rng: &mut R) -> Var {
        let value = {
            let t = self.value(z);
            let mut out = Tensor::zeros(t.shape());
            for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
                let p_plus = (T::one() + v) / (T::one() + T::one());
                let u: f64 = rng.gen::<f64>();
                *o = if T::from_f64_lossy(u) < p_plus {
                    T::one()
                } else {
                    -T::one()
                };
            }
            out
        };
        let req = self.requires(z);
        self.push(value, Op::Binarize(z), req)
    }

    /// Reverse pass from a scalar-valued root. Returns the gradient of the
    /// root w.r.t. every node that requires grad and is reachable.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let dy = grads[idx].take().unwrap();
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign_scaled(&g, T::one()),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    tensor::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, dy);
                self.accum(grads, *x, dx);
                self.accum(grads, *w, dw);
                if let Some(bv) = b {
                    self.accum(grads, *bv, db);
                }
            }
            Op::PixelShuffle { x, r } => {
                let dx = tensor::space_to_depth(dy, *r).expect("shuffle adjoint");
                self.accum(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = dy.zip_map(self.value(*b), |g, bv| g * bv).unwrap();
                let db = dy.zip_map(self.value(*a), |g, av| g * av).unwrap();
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Div(a, b) => {
                let bt = self.value(*b);
                let da = dy.zip_map(bt, |g, bv| g / bv).unwrap();
                let at = self.value(*a);
                let mut db = dy.zip_map(at, |g, av| g * av).unwrap();
                for (d, &bv) in db.data_mut().iter_mut().zip(bt.data()) {
                    *d = -*d / (bv * bv);
                }
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Sigmoid(x) => {
                let dx = dy
                    .zip_map(&node.value, |g, s| g * s * (T::one() - s))
                    .unwrap();
                self.accum(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = dy
                    .zip_map(&node.value, |g, t| g * (T::one() - t * t))
                    .unwrap();
                self.accum(grads, *x, dx);
            }
            Op::LeakyRelu(x, alpha) => {
                let a = *alpha;
                let dx = dy
                    .zip_map(self.value(*x), |g, v| if v >= T::zero() { g } else { g * a })
                    .unwrap();
                self.accum(grads, *x, dx);
            }
            Op::Softplus(x) => {
                let dx = dy
                    .zip_map(self.value(*x), |g, v| g * stable_sigmoid(v))
                    .unwrap();
                self.accum(grads, *x, dx);
            }
            Op::Abs(x) => {
                let dx = dy
                    .zip_map(self.value(*x), |g, v| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap();
                self.accum(grads, *x, dx);
            }
            Op::AddScalar(x, _) => self.accum(grads, *x, dy.clone()),
            Op::MulScalar(x, c) => {
                let k = *c;
                self.accum(grads, *x, dy.map(|g| g * k));
            }
            Op::PowConst(x, p) => {
                let pw = *p;
                let dx = dy
                    .zip_map(self.value(*x), |g, v| g * pw * v.powf(pw - T::one()))
                    .unwrap();
                self.accum(grads, *x, dx);
            }
            Op::ClampMin(x, floor) => {
                let f = *floor;
                let dx = dy
                    .zip_map(self.value(*x), |g, v| if v > f { g } else { T::zero() })
                    .unwrap();
                self.accum(grads, *x, dx);
            }
            Op::ConcatChannels(parts) => {
                let [b, _, h, w] = dy.shape();
                let plane = h * w;
                let mut co = 0usize;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    let mut dp = Tensor::zeros([b, c, h, w]);
                    for bi in 0..b {
                        let src = dy.index(bi, co, 0, 0);
                        let dst = dp.index(bi, 0, 0, 0);
                        dp.data_mut()[dst..dst + c * plane]
                            .copy_from_slice(&dy.data()[src..src + c * plane]);
                    }
                    self.accum(grads, p, dp);
                    co += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let [b, len, h, w] = dy.shape();
                let xs = self.value(*x).shape();
                let plane = h * w;
                let mut dx = Tensor::zeros(xs);
                for bi in 0..b {
                    let dst = dx.index(bi, *start, 0, 0);
                    let src = dy.index(bi, 0, 0, 0);
                    dx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&dy.data()[src..src + len * plane]);
                }
                self.accum(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let [b, c, h, w] = self.value(*x).shape();
                let inv = T::one() / T::from_f64_lossy((h * w) as f64);
                let mut dx = Tensor::zeros([b, c, h, w]);
                for bi in 0..b {
                    for ci in 0..c {
                        let g = dy.at(bi, ci, 0, 0) * inv;
                        let base = dx.index(bi, ci, 0, 0);
                        for i in 0..h * w {
                            dx.data_mut()[base + i] = g;
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let dx = tensor::avg_pool2_backward(self.value(*x).shape(), dy);
                self.accum(grads, *x, dx);
            }
            Op::MulChannelwise { x, s } => {
                let xt = self.value(*x);
                let st = self.value(*s);
                let [b, c, h, w] = xt.shape();
                let mut dx = Tensor::zeros([b, c, h, w]);
                let mut ds = Tensor::zeros([b, c, 1, 1]);
                for bi in 0..b {
                    for ci in 0..c {
                        let k = st.at(bi, ci, 0, 0);
                        let base = xt.index(bi, ci, 0, 0);
                        let mut acc = T::zero();
                        for i in 0..h * w {
                            dx.data_mut()[base + i] = dy.data()[base + i] * k;
                            acc = acc + dy.data()[base + i] * xt.data()[base + i];
                        }
                        ds.set(bi, ci, 0, 0, acc);
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *s, ds);
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                self.accum(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Mean(x) => {
                let n = T::from_f64_lossy(self.value(*x).numel() as f64);
                let g = dy.data()[0] / n;
                self.accum(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Binarize(x) => {
                // Straight-through: gradient passes unchanged.
                self.accum(grads, *x, dy.clone());
            }
        }
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn stable_softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
