//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list visits them in a valid topological order during [`Graph::backward`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{GraphError, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::scalar::{gemm, MatRef, Real};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Relu,
    LeakyRelu(T),
    Sigmoid,
    Sqrt,
    Abs,
    Square,
    Exp,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    ScaleBy { s: Var, x: Var },
    Unary(Var, Unary<T>),
    Reshape(Var),
    SumLast(Var),
    BroadcastLast(Var),
    MinLast(Var, Vec<usize>),
    Maximum(Var, Var),
    SoftmaxLast(Var),
    Transpose(Var),
    MatMul(Var, Var),
    SelectLast(Var, Vec<usize>),
    CatChannels(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2(Var, Vec<usize>),
    UpsampleNearest2(Var),
    SepLinear { x: Var, a: Arc<Tensor<T>>, b: Arc<Tensor<T>> },
    SumAll(Var),
    RepeatBatch(Var, usize),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    is_param: bool,
}

/// Gradients of a scalar with respect to the parameter leaves of a graph.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> GraphError {
    GraphError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> GraphError {
    GraphError::InvalidShape { op, shape: shape.to_vec(), reason: reason.into() }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let k = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / k.max(1), k)
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(invalid(op, shape, "expected NCHW")),
    }
}

/// Leading batch size, rows, cols of a `[.., M, N]` tensor.
fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(invalid(op, shape, "need at least two dimensions"));
    }
    let m = shape[shape.len() - 2];
    let n = shape[shape.len() - 1];
    Ok((shape[..shape.len() - 2].iter().product(), m, n))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node { value: Arc::new(value), op, requires_grad, is_param: false });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, param: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad: param, is_param: param });
        Var(nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(t), false)
    }

    pub fn constant_arc(&self, t: Arc<Tensor<T>>) -> Var {
        self.push_leaf(t, false)
    }

    pub fn scalar(&self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&self, t: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(t), true)
    }

    pub fn param_arc(&self, t: Arc<Tensor<T>>) -> Var {
        self.push_leaf(t, true)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(mismatch(op, ta.shape(), tb.shape()));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)?
        };
        Ok(self.push(value, mk(a, b), &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Element-wise maximum; ties route the gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum)
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// Adds a constant to every element.
    pub fn offset(&self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.push(value, Op::Offset(a), &[a])
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&self, s: Var, x: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(invalid("scale_by", sv.shape(), "scale must have one element"));
        }
        let k = sv.item();
        let value = self.value(x).map(|v| v * k);
        Ok(self.push(value, Op::ScaleBy { s, x }, &[s, x]))
    }

    fn unary(&self, a: Var, u: Unary<T>) -> Var {
        let value = self.value(a).map(|v| match u {
            Unary::Relu => v.max(T::zero()),
            Unary::LeakyRelu(slope) => {
                if v > T::zero() {
                    v
                } else {
                    v * slope
                }
            }
            Unary::Sigmoid => T::one() / (T::one() + (-v).exp()),
            Unary::Sqrt => v.max(T::zero()).sqrt(),
            Unary::Abs => v.abs(),
            Unary::Square => v * v,
            Unary::Exp => v.exp(),
        });
        self.push(value, Op::Unary(a, u), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    /// Square root whose gradient is taken as 0 where the output is 0, so
    /// norms of vanishing differences stay finite under differentiation.
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(mismatch("reshape", t.shape(), shape));
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Sums over the last axis: `[.., K] -> [..]` (`[K] -> [1]`).
    pub fn sum_last(&self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, k) = split_last(t.shape());
        let data: Vec<T> = t.data().chunks(k).map(|r| r.iter().copied().sum()).collect();
        let mut shape = t.shape()[..t.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        debug_assert_eq!(data.len(), rows);
        self.push(Tensor::new(&shape, data).expect("sum_last shape"), Op::SumLast(a), &[a])
    }

    pub fn mean_last(&self, a: Var) -> Var {
        let k = *self.shape(a).last().expect("shape");
        let s = self.sum_last(a);
        self.scale(s, T::one() / T::from_usize(k).expect("usize"))
    }

    /// Repeats every element `k` times along a new last axis.
    pub fn broadcast_last(&self, a: Var, k: usize) -> Var {
        let t = self.value(a);
        let data: Vec<T> = t.data().iter().flat_map(|&v| std::iter::repeat(v).take(k)).collect();
        let mut shape = t.shape().to_vec();
        shape.push(k);
        self.push(Tensor::new(&shape, data).expect("broadcast shape"), Op::BroadcastLast(a), &[a])
    }

    /// Minimum over the last axis (the first minimum wins ties).
    pub fn min_last(&self, a: Var) -> Var {
        let t = self.value(a);
        let (_, k) = split_last(t.shape());
        let mut arg = Vec::new();
        let data: Vec<T> = t
            .data()
            .chunks(k)
            .enumerate()
            .map(|(r, row)| {
                let (j, v) = row
                    .iter()
                    .enumerate()
                    .fold((0, row[0]), |(bj, bv), (j, &v)| if v < bv { (j, v) } else { (bj, bv) });
                arg.push(r * k + j);
                v
            })
            .collect();
        let mut shape = t.shape()[..t.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::new(&shape, data).expect("min shape"), Op::MinLast(a, arg), &[a])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_last(&self, a: Var) -> Var {
        let t = self.value(a);
        let (_, k) = split_last(t.shape());
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut z = T::zero();
            for &v in row {
                let e = (v - m).exp();
                z = z + e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v = *v / z;
            }
        }
        self.push(Tensor::new(t.shape(), data).expect("softmax"), Op::SoftmaxLast(a), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (b, m, n) = matrix_dims("transpose", t.shape())?;
        let value = Tensor::new(&transposed_shape(t.shape()), transpose_data(t.data(), b, m, n))?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ba, m, k) = matrix_dims("matmul", ta.shape())?;
        let (bb, k2, n) = matrix_dims("matmul", tb.shape())?;
        let lead_a = &ta.shape()[..ta.shape().len() - 2];
        let lead_b = &tb.shape()[..tb.shape().len() - 2];
        if k != k2 || ba != bb || lead_a != lead_b {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); ba * m * n];
        for i in 0..ba {
            gemm(
                T::one(),
                MatRef::row_major(&ta.data()[i * m * k..(i + 1) * m * k], m, k),
                MatRef::row_major(&tb.data()[i * k * n..(i + 1) * k * n], k, n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Gathers entries of the last axis: `[.., K] -> [.., idx.len()]`.
    pub fn select_last(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (_, k) = split_last(t.shape());
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(invalid("select_last", t.shape(), format!("index {bad} out of range")));
        }
        let data: Vec<T> = t.data().chunks(k).flat_map(|row| idx.iter().map(move |&i| row[i])).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("shape") = idx.len();
        Ok(self.push(Tensor::new(&shape, data)?, Op::SelectLast(a, idx.to_vec()), &[a]))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn cat_channels(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values.first().ok_or_else(|| invalid("cat_channels", &[], "nothing to concatenate"))?;
        let (n, _, h, w) = dims4("cat_channels", first.shape())?;
        let mut c_total = 0;
        for v in &values {
            let (vn, vc, vh, vw) = dims4("cat_channels", v.shape())?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(mismatch("cat_channels", first.shape(), v.shape()));
            }
            c_total += vc;
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for v in &values {
                let plane = v.shape()[1] * h * w;
                data.extend_from_slice(&v.data()[b * plane..(b + 1) * plane]);
            }
        }
        let value = Tensor::new(&[n, c_total, h, w], data)?;
        Ok(self.push(value, Op::CatChannels(parts.to_vec()), parts))
    }

    /// Size-preserving 2-D convolution with odd square kernels.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, c_in, h, wd) = dims4("conv2d", tx.shape())?;
        let (c_out, wc_in, kh, kw) = dims4("conv2d", tw.shape())?;
        if wc_in != c_in {
            return Err(mismatch("conv2d", tx.shape(), tw.shape()));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(invalid("conv2d", tw.shape(), "kernel must be square with odd size"));
        }
        let tb = b.map(|b| self.value(b));
        if let Some(tb) = &tb {
            if tb.shape() != [c_out] {
                return Err(mismatch("conv2d bias", tb.shape(), &[c_out]));
            }
        }
        let geom = ConvGeom { n, c_in, c_out, h, w: wd, k: kh, padding };
        let out = kernels::conv2d_forward(&geom, tx.data(), tw.data(), tb.as_ref().map(|t| t.data()));
        let value = Tensor::new(&[n, c_out, h, wd], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// 2x2 max pooling, stride 2; spatial dimensions must be even.
    pub fn max_pool2(&self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = dims4("max_pool2", t.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("max_pool2", t.shape(), "spatial dimensions must be even"));
        }
        let (out, arg) = kernels::max_pool2(t.data(), n * c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2(x, arg), &[x]))
    }

    pub fn upsample_nearest2(&self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = dims4("upsample_nearest2", t.shape())?;
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], kernels::upsample_nearest2(t.data(), n * c, h, w))?;
        Ok(self.push(value, Op::UpsampleNearest2(x), &[x]))
    }

    /// Applies the fixed linear map `A X B^T` to every spatial plane of an
    /// NCHW tensor (`A: H2 x H`, `B: W2 x W`).
    pub fn sep_linear(&self, x: Var, a: Arc<Tensor<T>>, b: Arc<Tensor<T>>) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = dims4("sep_linear", t.shape())?;
        let (h2, ah) = match a.shape() {
            &[h2, ah] => (h2, ah),
            s => return Err(invalid("sep_linear", s, "row operator must be 2-D")),
        };
        let (w2, bw) = match b.shape() {
            &[w2, bw] => (w2, bw),
            s => return Err(invalid("sep_linear", s, "column operator must be 2-D")),
        };
        if ah != h || bw != w {
            return Err(mismatch("sep_linear", t.shape(), &[h2, ah, w2, bw]));
        }
        let out = kernels::sep_linear(t.data(), n * c, h, w, a.data(), h2, b.data(), w2);
        let value = Tensor::new(&[n, c, h2, w2], out)?;
        Ok(self.push(value, Op::SepLinear { x, a, b }, &[x]))
    }

    /// Tiles a tensor with leading size 1 into `n` copies along the leading axis.
    pub fn repeat_batch(&self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().first() != Some(&1) || n == 0 {
            return Err(invalid("repeat_batch", t.shape(), format!("cannot repeat into {n} copies")));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = n;
        let data = t.data().repeat(n);
        Ok(self.push(Tensor::new(&shape, data)?, Op::RepeatBatch(a, n), &[a]))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_usize(n).expect("usize"))
    }

    /// Reverse sweep from a single-element `loss`; returns gradients for
    /// every parameter leaf that influences it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lt = &nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(invalid("backward", lt.shape(), "loss must have exactly one element"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            let y = &node.value;
            let mut acc = |v: Var, d: Vec<T>| accumulate(&mut grads, v, d);
            match &node.op {
                Op::Leaf => {
                    if node.is_param {
                        out.grads.insert(Var(i), Tensor::new(y.shape(), g).expect("grad shape"));
                    }
                }
                &Op::Add(a, b) => {
                    if needs(b) {
                        acc(b, g.clone());
                    }
                    if needs(a) {
                        acc(a, g);
                    }
                }
                &Op::Sub(a, b) => {
                    if needs(b) {
                        acc(b, g.iter().map(|&v| -v).collect());
                    }
                    if needs(a) {
                        acc(a, g);
                    }
                }
                &Op::Mul(a, b) => {
                    if needs(a) {
                        acc(a, zip(&g, val(b).data(), |g, y| g * y));
                    }
                    if needs(b) {
                        acc(b, zip(&g, val(a).data(), |g, x| g * x));
                    }
                }
                &Op::Div(a, b) => {
                    let (xa, xb) = (val(a).data(), val(b).data());
                    if needs(a) {
                        acc(a, zip(&g, xb, |g, d| g / d));
                    }
                    if needs(b) {
                        acc(b, g.iter().zip(xa).zip(xb).map(|((&g, &n), &d)| -g * n / (d * d)).collect());
                    }
                }
                &Op::Maximum(a, b) => {
                    let (xa, xb) = (val(a).data(), val(b).data());
                    if needs(a) {
                        acc(a, g.iter().zip(xa.iter().zip(xb)).map(|(&g, (x, y))| if x >= y { g } else { T::zero() }).collect());
                    }
                    if needs(b) {
                        acc(b, g.iter().zip(xa.iter().zip(xb)).map(|(&g, (x, y))| if x >= y { T::zero() } else { g }).collect());
                    }
                }
                &Op::Scale(a, s) => acc(a, g.iter().map(|&v| v * s).collect()),
                &Op::Offset(a) => acc(a, g),
                &Op::ScaleBy { s, x } => {
                    if needs(s) {
                        let ds: T = zip(&g, val(x).data(), |g, x| g * x).into_iter().sum();
                        acc(s, vec![ds]);
                    }
                    if needs(x) {
                        let k = val(s).item();
                        acc(x, g.iter().map(|&v| v * k).collect());
                    }
                }
                &Op::Unary(a, u) => {
                    let x = val(a).data();
                    let d: Vec<T> = match u {
                        Unary::Relu => zip(&g, x, |g, x| if x > T::zero() { g } else { T::zero() }),
                        Unary::LeakyRelu(s) => zip(&g, x, |g, x| if x > T::zero() { g } else { g * s }),
                        Unary::Sigmoid => zip(&g, y.data(), |g, y| g * y * (T::one() - y)),
                        Unary::Sqrt => zip(&g, y.data(), |g, y| {
                            if y > T::zero() {
                                g / (y + y)
                            } else {
                                T::zero()
                            }
                        }),
                        Unary::Abs => zip(&g, x, |g, x| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        }),
                        Unary::Square => zip(&g, x, |g, x| g * (x + x)),
                        Unary::Exp => zip(&g, y.data(), |g, y| g * y),
                    };
                    acc(a, d);
                }
                &Op::Reshape(a) => acc(a, g),
                &Op::SumLast(a) => {
                    let (_, k) = split_last(val(a).shape());
                    acc(a, g.iter().flat_map(|&v| std::iter::repeat(v).take(k)).collect());
                }
                &Op::BroadcastLast(a) => {
                    let (_, k) = split_last(y.shape());
                    acc(a, g.chunks(k).map(|r| r.iter().copied().sum()).collect());
                }
                Op::MinLast(a, arg) => {
                    let mut d = vec![T::zero(); val(*a).numel()];
                    for (gv, &j) in g.iter().zip(arg) {
                        d[j] = d[j] + *gv;
                    }
                    acc(*a, d);
                }
                &Op::SoftmaxLast(a) => {
                    let (_, k) = split_last(y.shape());
                    let mut d = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(k).zip(y.data().chunks(k)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        d.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                    }
                    acc(a, d);
                }
                &Op::Transpose(a) => {
                    let (b, m, n) = matrix_dims("transpose", y.shape()).expect("checked");
                    acc(a, transpose_data(&g, b, m, n));
                }
                &Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (bt, m, k) = matrix_dims("matmul", ta.shape()).expect("checked");
                    let n = tb.shape()[tb.shape().len() - 1];
                    if needs(a) {
                        let mut d = vec![T::zero(); bt * m * k];
                        for i in 0..bt {
                            gemm(
                                T::one(),
                                MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                                MatRef::transposed(&tb.data()[i * k * n..(i + 1) * k * n], k, n),
                                T::zero(),
                                &mut d[i * m * k..(i + 1) * m * k],
                            );
                        }
                        acc(a, d);
                    }
                    if needs(b) {
                        let mut d = vec![T::zero(); bt * k * n];
                        for i in 0..bt {
                            gemm(
                                T::one(),
                                MatRef::transposed(&ta.data()[i * m * k..(i + 1) * m * k], m, k),
                                MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                                T::zero(),
                                &mut d[i * k * n..(i + 1) * k * n],
                            );
                        }
                        acc(b, d);
                    }
                }
                Op::SelectLast(a, idx) => {
                    let (_, k) = split_last(val(*a).shape());
                    let mut d = vec![T::zero(); val(*a).numel()];
                    for (r, gr) in g.chunks(idx.len()).enumerate() {
                        for (&gv, &j) in gr.iter().zip(idx) {
                            d[r * k + j] = d[r * k + j] + gv;
                        }
                    }
                    acc(*a, d);
                }
                Op::CatChannels(parts) => {
                    let (n, c_total, h, w) = dims4("cat_channels", y.shape()).expect("checked");
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).shape()[1];
                        if needs(p) {
                            let mut d = Vec::with_capacity(n * c * h * w);
                            for b in 0..n {
                                let start = (b * c_total + offset) * h * w;
                                d.extend_from_slice(&g[start..start + c * h * w]);
                            }
                            acc(p, d);
                        }
                        offset += c;
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let want = (needs(*x), needs(*w), b.is_some_and(needs));
                    let grads_c = kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), &g, want);
                    if let Some(d) = grads_c.dx {
                        acc(*x, d);
                    }
                    if let Some(d) = grads_c.dw {
                        acc(*w, d);
                    }
                    if let (Some(b), Some(d)) = (b, grads_c.db) {
                        acc(*b, d);
                    }
                }
                Op::MaxPool2(a, arg) => {
                    let mut d = vec![T::zero(); val(*a).numel()];
                    for (&gv, &j) in g.iter().zip(arg) {
                        d[j] = d[j] + gv;
                    }
                    acc(*a, d);
                }
                &Op::RepeatBatch(a, n) => {
                    let k = g.len() / n;
                    let mut d = vec![T::zero(); k];
                    for chunk in g.chunks(k) {
                        for (dv, &gv) in d.iter_mut().zip(chunk) {
                            *dv = *dv + gv;
                        }
                    }
                    acc(a, d);
                }
                &Op::UpsampleNearest2(a) => {
                    let (n, c, h, w) = dims4("upsample", val(a).shape()).expect("checked");
                    acc(a, kernels::upsample_nearest2_backward(&g, n * c, h, w));
                }
                Op::SepLinear { x, a, b } => {
                    let (n, c, h, w) = dims4("sep_linear", val(*x).shape()).expect("checked");
                    let (h2, w2) = (a.shape()[0], b.shape()[0]);
                    acc(*x, kernels::sep_linear_backward(&g, n * c, h, w, a.data(), h2, b.data(), w2));
                }
                &Op::SumAll(a) => {
                    let n = val(a).numel();
                    acc(a, vec![g[0]; n]);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn zip<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transposed_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    let n = s.len();
    s.swap(n - 1, n - 2);
    s
}

fn transpose_data<T: Real>(data: &[T], b: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for i in 0..b {
        let src = &data[i * m * n..(i + 1) * m * n];
        let dst = &mut out[i * m * n..(i + 1) * m * n];
        for r in 0..m {
            for c in 0..n {
                dst[c * m + r] = src[r * n + c];
            }
        }
    }
    out
}
