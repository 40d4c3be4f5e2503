//! Reverse-mode automatic differentiation over a dynamically built tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough information to propagate
//! gradients back to its inputs. [`Tape::backward`] walks the nodes once in
//! reverse order and consumes the tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, softmax_in_place, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp { x: Var, lo: T, hi: T },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    MatMul { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    PrependToken { x: Var, token: Var },
    MaskRows { x: Var, token: Var, mask: Vec<bool> },
    GatherRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    KoLeo { x: Var, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor<T>)> {
        self.grads.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs shape is a strict suffix of lhs shape and repeats over it
    Rhs,
    Lhs,
}

fn broadcast_rule(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(Broadcast::Rhs)
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(Broadcast::Lhs)
    } else {
        Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Sum `full` down to `small_len` elements by folding repeats.
fn reduce_repeats<T: Real>(full: &[T], small_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); small_len];
    for chunk in full.chunks(small_len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let inner_len = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    'outer: loop {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&strides[..rank - 1])
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        // advance all but the last axis
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break 'outer;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

struct KoleoParts<T> {
    value: T,
    normalized: Vec<T>,
    norms: Vec<T>,
    nearest: Vec<usize>,
    dists: Vec<T>,
}

/// Shared KoLeo evaluation: rows are L2-normalized, then
/// `-(1/n) * sum_i log(max(eps, min_{j != i} |z_i - z_j|))`.
fn koleo_parts<T: Real>(x: &[T], n: usize, d: usize, eps: T) -> KoleoParts<T> {
    let mut normalized = x.to_vec();
    let mut norms = Vec::with_capacity(n);
    for row in normalized.chunks_mut(d) {
        let norm = row
            .iter()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
            .max(T::of(1e-12));
        for v in row.iter_mut() {
            *v = *v / norm;
        }
        norms.push(norm);
    }
    let mut nearest = vec![0usize; n];
    let mut dists = vec![T::infinity(); n];
    for i in 0..n {
        let zi = &normalized[i * d..(i + 1) * d];
        for j in 0..n {
            if i == j {
                continue;
            }
            let zj = &normalized[j * d..(j + 1) * d];
            let dist = zi
                .iter()
                .zip(zj)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            if dist < dists[i] {
                dists[i] = dist;
                nearest[i] = j;
            }
        }
    }
    let total: T = dists.iter().map(|&dist| dist.max(eps).ln()).sum();
    KoleoParts {
        value: -total / T::of(n as f64),
        normalized,
        norms,
        nearest,
        dists,
    }
}

/// KoLeo value of the rows of an `n x d` tensor, untracked.
pub fn koleo_value<T: Real>(x: &Tensor<T>, eps: T) -> Result<T> {
    match *x.shape() {
        [n, d] if n >= 2 => Ok(koleo_parts(x.data(), n, d, eps).value),
        _ => Err(Error::contract(format!(
            "KoLeo needs an n x d matrix with n >= 2, got {:?}",
            x.shape()
        ))),
    }
}

/// A recording of primitive operations for one forward pass.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if self.consumed {
            return Err(Error::contract("tape already consumed by backward()"));
        }
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::contract(format!("variable {} is not on this tape", v.0)))
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Gradients are returned for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Current value of a variable.
    ///
    /// Panics if the variable does not belong to this tape or the tape was consumed.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let rule = broadcast_rule(name, va.shape(), vb.shape())?;
        let (shape, data) = match rule {
            Broadcast::Same => (
                va.shape().to_vec(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Rhs => {
                let mut data = Vec::with_capacity(va.numel());
                for chunk in va.data().chunks_exact(vb.numel()) {
                    data.extend(chunk.iter().zip(vb.data()).map(|(&x, &y)| f(x, y)));
                }
                (va.shape().to_vec(), data)
            }
            Broadcast::Lhs => {
                let mut data = Vec::with_capacity(vb.numel());
                for chunk in vb.data().chunks_exact(va.numel()) {
                    data.extend(va.data().iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
                (vb.shape().to_vec(), data)
            }
        };
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Elementwise sum; a suffix-shaped operand broadcasts over the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.node(x)?.value.map(f);
        let rg = self.grad_of(&[x]);
        Ok(self.push(value, op, rg))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Result<Var> {
        self.affine(x, scale, T::zero())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Natural log; every input element must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.node(x)?.value.data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad:?}"),
            });
        }
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = &self.node(x)?.value;
        if axis >= value.shape().len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {:?}",
                value.shape()
            )));
        }
        let (outer, len, inner) = axis_split(value.shape(), axis);
        let mut data = value.data().to_vec();
        if inner == 1 {
            for row in data.chunks_mut(len) {
                softmax_in_place(row);
            }
        } else {
            let mut buf = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    for l in 0..len {
                        buf[l] = data[(o * len + l) * inner + i];
                    }
                    softmax_in_place(&mut buf);
                    for l in 0..len {
                        data[(o * len + l) * inner + i] = buf[l];
                    }
                }
            }
        }
        let out = Tensor::from_parts(value.shape().to_vec(), data);
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let d = *vx.shape().last().unwrap();
        for p in [gamma, beta] {
            let vp = &self.node(p)?.value;
            if vp.shape() != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: vx.shape().to_vec(),
                    rhs: vp.shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.nodes[gamma.0].value.data(), self.nodes[beta.0].value.data());
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(d) {
            let (mean, inv) = row_stats(row, eps);
            out.extend(
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| (v - mean) * inv * g[j] + b[j]),
            );
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.grad_of(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            rg,
        ))
    }

    /// Matrix product.
    ///
    /// `b` of rank 2 (`k x n`) applies to the trailing `m x k` of `a`, whose
    /// leading axes fold into rows. `b` of rank 3 (`batch x k x n`) multiplies
    /// batch-wise against `a` of shape `batch x m x k`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Tape::matmul`] with the trailing two axes of `b` transposed.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let dims = matmul_dims(va.shape(), vb.shape(), trans_b)?;
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        let (sa, sb, so) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
        for i in 0..dims.batch {
            let bs = if dims.batched { &vb.data()[i * sb..(i + 1) * sb] } else { vb.data() };
            gemm(
                dims.m,
                dims.k,
                dims.n,
                &va.data()[i * sa..(i + 1) * sa],
                false,
                bs,
                trans_b,
                &mut out[i * so..(i + 1) * so],
                false,
            );
        }
        let out = Tensor::from_parts(dims.out_shape, out);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(x)?.value.clone().reshape(shape)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = &self.node(x)?.value;
        let rank = value.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::contract(format!(
                "permutation {axes:?} invalid for rank {rank}"
            )));
        }
        let (data, shape) = permute_data(value.data(), value.shape(), axes);
        let rg = self.grad_of(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = &self.node(x)?.value;
        let shape = value.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::contract(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, full, inner) = axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&value.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let rg = self.grad_of(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    /// Prepends the same `d`-vector token to every sequence of `x: [batch, len, d]`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let (vx, vt) = (&self.node(x)?.value, &self.node(token)?.value);
        let &[batch, len, d] = vx.shape() else {
            return Err(Error::Dimension {
                op: "prepend_token",
                lhs: vx.shape().to_vec(),
                rhs: vt.shape().to_vec(),
            });
        };
        if vt.numel() != d {
            return Err(Error::Dimension {
                op: "prepend_token",
                lhs: vx.shape().to_vec(),
                rhs: vt.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(batch * (len + 1) * d);
        for seq in vx.data().chunks(len * d) {
            data.extend_from_slice(vt.data());
            data.extend_from_slice(seq);
        }
        let rg = self.grad_of(&[x, token]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, len + 1, d], data),
            Op::PrependToken { x, token },
            rg,
        ))
    }

    /// Replaces the rows of `x: [.., d]` flagged in `mask` with `token`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let (vx, vt) = (&self.node(x)?.value, &self.node(token)?.value);
        let d = *vx.shape().last().unwrap();
        if vt.numel() != d || mask.len() * d != vx.numel() {
            return Err(Error::Dimension {
                op: "mask_rows",
                lhs: vx.shape().to_vec(),
                rhs: vec![mask.len(), vt.numel()],
            });
        }
        let mut data = vx.data().to_vec();
        for (row, &m) in data.chunks_mut(d).zip(mask) {
            if m {
                row.copy_from_slice(vt.data());
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.grad_of(&[x, token]);
        Ok(self.push(
            out,
            Op::MaskRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let &[n, d] = vx.shape() else {
            return Err(Error::contract(format!(
                "gather_rows needs rank 2, got {:?}",
                vx.shape()
            )));
        };
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::contract(format!(
                "gather_rows indices out of range for {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&vx.data()[r * d..(r + 1) * d]);
        }
        let rg = self.grad_of(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), d], data),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.node(x)?.value.data().iter().copied().sum();
        let rg = self.grad_of(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = &self.node(x)?.value;
        let s: T = value.data().iter().copied().sum::<T>() / T::of(value.numel() as f64);
        let rg = self.grad_of(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// KoLeo spreading regularizer over the rows of `x: [n, d]`.
    pub fn koleo(&mut self, x: Var, eps: T) -> Result<Var> {
        let value = koleo_value(&self.node(x)?.value, eps)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::KoLeo { x, eps }, rg))
    }

    /// Propagates d(loss)/d(leaf) to every `requires_grad` leaf and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::contract("backward() called twice on the same tape"));
        }
        let numel = self.node(loss)?.value.numel();
        if numel != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut nodes = std::mem::take(&mut self.nodes);
        nodes.truncate(loss.0 + 1);
        let needs: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        let mut out = BTreeMap::new();

        while let Some(node) = nodes.pop() {
            let i = nodes.len();
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None if matches!(node.op, Op::Leaf) => Tensor::zeros(node.value.shape()),
                None => continue,
            };
            let mut acc = |v: Var, delta: Vec<T>| {
                if !needs[v.0] {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                            *e = *e + d;
                        }
                    }
                    slot @ None => {
                        let shape = nodes[v.0].value.shape().to_vec();
                        *slot = Some(Tensor::from_parts(shape, delta));
                    }
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            let gd = g.data();
            match &node.op {
                Op::Leaf => {
                    out.insert(Var(i), g);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                    let (na, nb) = (val(*a).numel(), val(*b).numel());
                    let ga = if na == gd.len() { gd.to_vec() } else { reduce_repeats(gd, na) };
                    let gb = if nb == gd.len() { gd.to_vec() } else { reduce_repeats(gd, nb) };
                    acc(*a, ga);
                    acc(*b, gb.into_iter().map(|v| sign * v).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    let n = gd.len();
                    let times = |other: &[T]| -> Vec<T> {
                        let mut out = Vec::with_capacity(n);
                        for chunk in gd.chunks_exact(other.len()) {
                            out.extend(chunk.iter().zip(other).map(|(&g, &o)| g * o));
                        }
                        out
                    };
                    let ga = times(vb);
                    let gb = times(va);
                    let ga = if va.len() == n { ga } else { reduce_repeats(&ga, va.len()) };
                    let gb = if vb.len() == n { gb } else { reduce_repeats(&gb, vb.len()) };
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Affine { x, scale } => acc(*x, gd.iter().map(|&v| v * *scale).collect()),
                Op::Relu(x) => acc(
                    *x,
                    gd.iter()
                        .zip(val(*x).data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                ),
                Op::Sigmoid(x) => acc(
                    *x,
                    gd.iter()
                        .zip(node.value.data())
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect(),
                ),
                Op::Exp(x) => acc(
                    *x,
                    gd.iter().zip(node.value.data()).map(|(&g, &y)| g * y).collect(),
                ),
                Op::Log(x) => acc(
                    *x,
                    gd.iter().zip(val(*x).data()).map(|(&g, &v)| g / v).collect(),
                ),
                Op::Clamp { x, lo, hi } => acc(
                    *x,
                    gd.iter()
                        .zip(val(*x).data())
                        .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                        .collect(),
                ),
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + k;
                            let dot: T = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] = y[at(l)] * (gd[at(l)] - dot);
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let vx = val(*x);
                    let gam = val(*gamma).data();
                    let d = gam.len();
                    let dn = T::of(d as f64);
                    let mut gx = Vec::with_capacity(vx.numel());
                    let mut ggamma = vec![T::zero(); d];
                    let mut gbeta = vec![T::zero(); d];
                    let mut xhat = vec![T::zero(); d];
                    let mut dxhat = vec![T::zero(); d];
                    for (row, grow) in vx.data().chunks(d).zip(gd.chunks(d)) {
                        let (mean, inv) = row_stats(row, *eps);
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for j in 0..d {
                            xhat[j] = (row[j] - mean) * inv;
                            dxhat[j] = grow[j] * gam[j];
                            ggamma[j] = ggamma[j] + grow[j] * xhat[j];
                            gbeta[j] = gbeta[j] + grow[j];
                            s1 = s1 + dxhat[j];
                            s2 = s2 + dxhat[j] * xhat[j];
                        }
                        for j in 0..d {
                            gx.push(inv / dn * (dn * dxhat[j] - s1 - xhat[j] * s2));
                        }
                    }
                    acc(*x, gx);
                    acc(*gamma, ggamma);
                    acc(*beta, gbeta);
                }
                Op::MatMul { a, b, trans_b } => {
                    let (va, vb) = (val(*a), val(*b));
                    let dims = matmul_dims(va.shape(), vb.shape(), *trans_b)
                        .expect("validated at forward");
                    let (m, k, n) = (dims.m, dims.k, dims.n);
                    let (sa, sb, so) = (m * k, k * n, m * n);
                    if needs[a.0] {
                        let mut ga = vec![T::zero(); va.numel()];
                        for i in 0..dims.batch {
                            let bs = if dims.batched { &vb.data()[i * sb..(i + 1) * sb] } else { vb.data() };
                            // dA = dC * op(B)^T
                            gemm(m, n, k, &gd[i * so..(i + 1) * so], false, bs, !*trans_b, &mut ga[i * sa..(i + 1) * sa], false);
                        }
                        acc(*a, ga);
                    }
                    if needs[b.0] {
                        let mut gb = vec![T::zero(); vb.numel()];
                        for i in 0..dims.batch {
                            let off = if dims.batched { i * sb } else { 0 };
                            let target = &mut gb[off..off + sb];
                            let accumulate = !dims.batched && i > 0;
                            let (a_i, g_i) = (&va.data()[i * sa..(i + 1) * sa], &gd[i * so..(i + 1) * so]);
                            if *trans_b {
                                // d(B stored n x k) = dC^T * A
                                gemm(n, m, k, g_i, true, a_i, false, target, accumulate);
                            } else {
                                gemm(k, m, n, a_i, true, g_i, false, target, accumulate);
                            }
                        }
                        acc(*b, gb);
                    }
                }
                Op::Reshape(x) => acc(*x, g.into_data()),
                Op::Permute { x, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let (data, _) = permute_data(gd, node.value.shape(), &inverse);
                    acc(*x, data);
                }
                Op::Narrow { x, axis, start } => {
                    let in_shape = val(*x).shape();
                    let (outer, full, inner) = axis_split(in_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![T::zero(); val(*x).numel()];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                    }
                    acc(*x, gx);
                }
                Op::PrependToken { x, token } => {
                    let d = val(*token).numel();
                    let seq = node.value.shape()[1] * d;
                    let mut gx = Vec::with_capacity(val(*x).numel());
                    let mut gt = vec![T::zero(); d];
                    for chunk in gd.chunks(seq) {
                        for (t, &v) in gt.iter_mut().zip(&chunk[..d]) {
                            *t = *t + v;
                        }
                        gx.extend_from_slice(&chunk[d..]);
                    }
                    acc(*x, gx);
                    acc(*token, gt);
                }
                Op::MaskRows { x, token, mask } => {
                    let d = val(*token).numel();
                    let mut gx = gd.to_vec();
                    let mut gt = vec![T::zero(); d];
                    for (row, &m) in gx.chunks_mut(d).zip(mask) {
                        if m {
                            for (t, v) in gt.iter_mut().zip(row.iter_mut()) {
                                *t = *t + *v;
                                *v = T::zero();
                            }
                        }
                    }
                    acc(*x, gx);
                    acc(*token, gt);
                }
                Op::GatherRows { x, rows } => {
                    let d = node.value.shape()[1];
                    let mut gx = vec![T::zero(); val(*x).numel()];
                    for (&r, grow) in rows.iter().zip(gd.chunks(d)) {
                        for (dst, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(grow) {
                            *dst = *dst + v;
                        }
                    }
                    acc(*x, gx);
                }
                Op::Sum(x) => acc(*x, vec![gd[0]; val(*x).numel()]),
                Op::Mean(x) => {
                    let n = val(*x).numel();
                    acc(*x, vec![gd[0] / T::of(n as f64); n]);
                }
                Op::KoLeo { x, eps } => {
                    let vx = val(*x);
                    let (n, d) = (vx.shape()[0], vx.shape()[1]);
                    let parts = koleo_parts(vx.data(), n, d, *eps);
                    let z = &parts.normalized;
                    let scale = gd[0] / T::of(n as f64);
                    let mut gz = vec![T::zero(); n * d];
                    for i in 0..n {
                        let dist = parts.dists[i];
                        if dist <= *eps {
                            continue;
                        }
                        let j = parts.nearest[i];
                        let coef = scale / (dist * dist);
                        for c in 0..d {
                            let diff = (z[i * d + c] - z[j * d + c]) * coef;
                            gz[i * d + c] = gz[i * d + c] - diff;
                            gz[j * d + c] = gz[j * d + c] + diff;
                        }
                    }
                    let mut gx = vec![T::zero(); n * d];
                    for i in 0..n {
                        let zi = &z[i * d..(i + 1) * d];
                        let gi = &gz[i * d..(i + 1) * d];
                        let dot: T = zi.iter().zip(gi).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            gx[i * d + c] = (gi[c] - zi[c] * dot) / parts.norms[i];
                        }
                    }
                    acc(*x, gx);
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

struct MatmulDims {
    batch: usize,
    batched: bool,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulDims> {
    let mismatch = || Error::Dimension {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 {
        return Err(mismatch());
    }
    let k = a[a.len() - 1];
    match *b {
        [r, c] => {
            let (bk, n) = if trans_b { (c, r) } else { (r, c) };
            if bk != k {
                return Err(mismatch());
            }
            let rows: usize = a[..a.len() - 1].iter().product();
            let mut out_shape = a[..a.len() - 1].to_vec();
            out_shape.push(n);
            Ok(MatmulDims {
                batch: 1,
                batched: false,
                m: rows,
                k,
                n,
                out_shape,
            })
        }
        [bt, r, c] if a.len() == 3 && a[0] == bt => {
            let (bk, n) = if trans_b { (c, r) } else { (r, c) };
            if bk != k {
                return Err(mismatch());
            }
            Ok(MatmulDims {
                batch: bt,
                batched: true,
                m: a[1],
                k,
                n,
                out_shape: vec![bt, a[1], n],
            })
        }
        _ => Err(mismatch()),
    }
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, (var + eps).sqrt().recip())
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Central finite-difference gradient `(f(w + h e_i) - f(w - h e_i)) / 2h`.
pub fn finite_difference_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    w: &Tensor<T>,
    h: T,
) -> Tensor<T> {
    let mut probe = w.clone();
    let two_h = h + h;
    let grads = (0..w.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / two_h
        })
        .collect();
    Tensor::from_parts(w.shape().to_vec(), grads)
}

/// `|a - b| / max(|a|, |b|, floor)`, the gradient-check error measure.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let col = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let r = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.matmul(eye, z).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0; 4]);
        let r = tape.matmul(m, col).unwrap();
        assert_eq!(tape.value(r).shape(), &[2, 1]);
        assert_eq!(tape.value(r).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        assert!((tape.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_inner_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let c = tape.constant(t(&[4], &[3.0; 4]));
        let gamma = tape.constant(Tensor::ones(&[4]));
        let beta = tape.constant(Tensor::zeros(&[4]));
        let ln = tape.layer_norm(c, gamma, beta, 1e-5).unwrap();
        assert_eq!(tape.value(ln).data(), &[0.0; 4]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn broadcast_add_and_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(t(&[3], &[10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, bad).is_err());
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0; 6]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[3.0, -2.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0, -2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::ones(&[3]));
        let r = tape.relu(w).unwrap();
        assert!(matches!(tape.backward(r), Err(Error::Contract(_))));
        let s = tape.sum(r).unwrap();
        assert!(tape.backward(s).is_ok());
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        assert!(tape.relu(w).is_err());
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param(Tensor::ones(&[2]));
        let unused = tape.param(Tensor::ones(&[3]));
        let s = tape.sum(used).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn finite_difference_examples() {
        let w = Tensor::from_fn(&[4], |i| i as f64 * 0.3);
        let g = finite_difference_grad(|x| x.data().iter().sum(), &w, 1e-4);
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let w = t(&[1], &[3.0]);
        let g = finite_difference_grad(|x| x.data()[0] * x.data()[0], &w, 1e-4);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
        // element (b=1, t=2, c=3) lands at (3, 1, 2)
        assert_eq!(tape.value(p).data()[3 * 6 + 3 + 2], 23.0);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn koleo_antipodal_pair() {
        let x = t(&[2, 3], &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        let v = koleo_value(&x, 1e-8).unwrap();
        assert!((v + 2f64.ln()).abs() < 1e-12);
        assert!(koleo_value(&t(&[1, 3], &[1.0, 0.0, 0.0]), 1e-8).is_err());
    }
}
