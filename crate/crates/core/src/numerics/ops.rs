//! Differentiable tensor operations.

use rand::Rng;

use super::tensor::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Additive bias applied to masked attention logits.
pub const MASK_FILL: f64 = -1e9;

// ── Broadcasting ─────────────────────────────────────────────────────

/// Index mapping from a broadcast output back into its two operands.
#[derive(Debug, Clone)]
enum Broadcast {
    Same,
    /// `b` matches the trailing dims of `a`.
    RightSuffix(usize),
    /// `a` matches the trailing dims of `b`.
    LeftSuffix(usize),
    General { a: Vec<usize>, b: Vec<usize> },
}

impl Broadcast {
    #[inline]
    fn a(&self, i: usize) -> usize {
        match self {
            Broadcast::Same | Broadcast::RightSuffix(_) => i,
            Broadcast::LeftSuffix(n) => i % n,
            Broadcast::General { a, .. } => a[i],
        }
    }

    #[inline]
    fn b(&self, i: usize) -> usize {
        match self {
            Broadcast::Same | Broadcast::LeftSuffix(_) => i,
            Broadcast::RightSuffix(n) => i % n,
            Broadcast::General { b, .. } => b[i],
        }
    }
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[first..]
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension {
                    op,
                    left: a.to_vec(),
                    right: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Flat index into a tensor of `shape` for every element of `out_shape`.
fn broadcast_indices(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let total = numel(out_shape);
    let mut idx = vec![0usize; total];
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for slot in idx.iter_mut() {
        *slot = flat;
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same));
    }
    let out = broadcast_shape(op, a, b)?;
    let sa = strip_leading_ones(a);
    let sb = strip_leading_ones(b);
    let plan = if out == a && a.ends_with(sb) {
        Broadcast::RightSuffix(numel(sb))
    } else if out == b && b.ends_with(sa) {
        Broadcast::LeftSuffix(numel(sa))
    } else {
        Broadcast::General {
            a: broadcast_indices(a, &out),
            b: broadcast_indices(b, &out),
        }
    };
    Ok((out, plan))
}

// ── Elementwise ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Gelu,
    Tanh,
    Exp,
    Square,
}

impl ElementwiseOp {
    pub fn arity(self) -> usize {
        match self {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        }
    }
}

/// Dispatches one of the elementwise kinds over `args`.
pub fn elementwise<T: Scalar>(op: ElementwiseOp, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if args.len() != op.arity() {
        return Err(Error::contract(format!(
            "{op:?} expects {} argument(s), got {}",
            op.arity(),
            args.len()
        )));
    }
    Ok(match op {
        ElementwiseOp::Add => args[0].add(args[1])?,
        ElementwiseOp::Sub => args[0].sub(args[1])?,
        ElementwiseOp::Mul => args[0].mul(args[1])?,
        ElementwiseOp::Sigmoid => args[0].sigmoid(),
        ElementwiseOp::Gelu => args[0].gelu(),
        ElementwiseOp::Tanh => args[0].tanh(),
        ElementwiseOp::Exp => args[0].exp(),
        ElementwiseOp::Square => args[0].square(),
    })
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// tanh approximation of GELU.
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let c = T::c(0.044715);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::c(3.0) * c * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}

fn reduce_into<T: Scalar>(len: usize, n: usize, idx: impl Fn(usize) -> usize, val: impl Fn(usize) -> T) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for i in 0..n {
        out[idx(i)] += val(i);
    }
    out
}

impl<T: Scalar> Tensor<T> {
    fn binary(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: fn(T, T) -> T,
        // d/da and d/db given (a, b)
        da: fn(T, T) -> T,
        db: fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (shape, bc) = plan(op, self.shape(), other.shape())?;
        let n = numel(&shape);
        let data = {
            let a = self.data();
            let b = other.data();
            (0..n).map(|i| f(a[bc.a(i)], b[bc.b(i)])).collect()
        };
        Ok(Tensor::from_op(data, shape, op, vec![self.clone(), other.clone()], move |g, inputs| {
            let a = inputs[0].data();
            let b = inputs[1].data();
            let ga = inputs[0].tracks().then(|| {
                reduce_into(a.len(), g.len(), |i| bc.a(i), |i| g[i] * da(a[bc.a(i)], b[bc.b(i)]))
            });
            let gb = inputs[1].tracks().then(|| {
                reduce_into(b.len(), g.len(), |i| bc.b(i), |i| g[i] * db(a[bc.a(i)], b[bc.b(i)]))
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// `y = f(x)` with `dy/dx = df(x, y)`.
    fn unary(&self, op: &'static str, f: impl Fn(T) -> T, df: fn(T, T) -> T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let saved = if self.tracks() { out.clone() } else { Vec::new() };
        Tensor::from_op(out, self.shape().to_vec(), op, vec![self.clone()], move |g, inputs| {
            let x = inputs[0].data();
            vec![Some(
                g.iter()
                    .zip(x.iter().zip(&saved))
                    .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn gelu(&self) -> Tensor<T> {
        self.unary("gelu", gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| T::c(2.0) * x)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, k: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| x * k).collect();
        Tensor::from_op(out, self.shape().to_vec(), "scale", vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|&gi| gi * k).collect())]
        })
    }

    pub fn add_scalar(&self, k: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| x + k).collect();
        Tensor::from_op(out, self.shape().to_vec(), "add_scalar", vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// `1 - x`, kept exact so that `x = 0` gives exactly `1`.
    pub fn one_minus(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| T::one() - x).collect();
        Tensor::from_op(out, self.shape().to_vec(), "one_minus", vec![self.clone()], |g, _| {
            vec![Some(g.iter().map(|&gi| -gi).collect())]
        })
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], Vec::new(), "sum", vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().scale(T::one() / T::c(n as f64))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// Matrix product over the last two dims.
    ///
    /// `[.., m, k] x [k, n]` flattens the leading dims of the left operand;
    /// `[b.., m, k] x [b.., k, n]` multiplies matching batches.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let err = || Error::Dimension {
            op: "matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.is_empty() || sb.len() < 2 {
            return Err(err());
        }
        let k = sa[sa.len() - 1];
        let (batch, m, n, shared_rhs) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(err());
            }
            (1, numel(&sa[..sa.len() - 1]), sb[1], true)
        } else {
            if sa.len() != sb.len()
                || sa[..sa.len() - 2] != sb[..sb.len() - 2]
                || sb[sb.len() - 2] != k
            {
                return Err(err());
            }
            let batch = numel(&sa[..sa.len() - 2]);
            (batch, sa[sa.len() - 2], sb[sb.len() - 1], false)
        };
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);

        let mut out = vec![T::zero(); batch * m * n];
        {
            let a = self.data();
            let b = other.data();
            for bi in 0..batch {
                let ao = bi * m * k;
                let bo = if shared_rhs { 0 } else { bi * k * n };
                gemm_nn(&a[ao..ao + m * k], &b[bo..bo + k * n], &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
            }
        }

        Ok(Tensor::from_op(out, shape, "matmul", vec![self.clone(), other.clone()], move |g, inputs| {
            let a = inputs[0].data();
            let b = inputs[1].data();
            let ga = inputs[0].tracks().then(|| {
                let mut ga = vec![T::zero(); a.len()];
                for bi in 0..batch {
                    let bo = if shared_rhs { 0 } else { bi * k * n };
                    gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &b[bo..bo + k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = inputs[1].tracks().then(|| {
                let mut gb = vec![T::zero(); b.len()];
                for bi in 0..batch {
                    let bo = if shared_rhs { 0 } else { bi * k * n };
                    gemm_tn(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bo..bo + k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    // ── Normalization ────────────────────────────────────────────────

    /// Softmax over the last dimension. `mask` (true = masked) must match the
    /// trailing dims of `self`; masked logits get [`MASK_FILL`] added.
    pub fn softmax_lastdim(&self, mask: Option<&Mask>) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        let cols = *shape.last().ok_or_else(|| Error::contract("softmax on a scalar"))?;
        let rows = if cols == 0 { 0 } else { self.numel() / cols };
        if let Some(m) = mask {
            if !shape.ends_with(&m.shape) || m.shape.is_empty() || *m.shape.last().unwrap() != cols {
                return Err(Error::Dimension {
                    op: "softmax_lastdim",
                    left: shape,
                    right: m.shape.clone(),
                });
            }
            let mrows = m.masked.len() / cols;
            for r in 0..mrows {
                if m.masked[r * cols..(r + 1) * cols].iter().all(|&x| x) {
                    return Err(Error::SingularRow { row: r });
                }
            }
        }
        let fill = T::c(MASK_FILL);
        let mut out = self.to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            if let Some(m) = mask {
                let mrow = r % (m.masked.len() / cols);
                for (v, &masked) in row.iter_mut().zip(&m.masked[mrow * cols..(mrow + 1) * cols]) {
                    if masked {
                        *v += fill;
                    }
                }
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let saved = if self.tracks() { out.clone() } else { Vec::new() };
        Ok(Tensor::from_op(out, shape, "softmax", vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for r in 0..rows {
                let y = &saved[r * cols..(r + 1) * cols];
                let gy = &g[r * cols..(r + 1) * cols];
                let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                for c in 0..cols {
                    gx[r * cols + c] = y[c] * (gy[c] - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Layer normalization over the last dim with population variance.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::contract("layer_norm on a scalar"))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: shape,
                right: gain.shape().to_vec(),
            });
        }
        let rows = if d == 0 { 0 } else { self.numel() / d };
        let x = self.data();
        let gv = gain.data();
        let bv = bias.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        let dn = T::c(d as f64);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv[c] + bv[c];
            }
        }
        drop((x, gv, bv));
        Ok(Tensor::from_op(
            out,
            shape,
            "layer_norm",
            vec![self.clone(), gain.clone(), bias.clone()],
            move |g, inputs| {
                let gv = inputs[1].data();
                let mut gx = vec![T::zero(); g.len()];
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                for r in 0..rows {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for c in 0..d {
                        let i = r * d + c;
                        let dh = g[i] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[i];
                        ggain[c] += g[i] * xhat[i];
                        gbias[c] += g[i];
                    }
                    mean_dh = mean_dh / dn;
                    mean_dh_h = mean_dh_h / dn;
                    for c in 0..d {
                        let i = r * d + c;
                        gx[i] = rstd[r] * (g[i] * gv[c] - mean_dh - xhat[i] * mean_dh_h);
                    }
                }
                vec![Some(gx), Some(ggain), Some(gbias)]
            },
        ))
    }

    // ── Shape manipulation ───────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), "reshape", vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension {
                op: "permute",
                left: shape.to_vec(),
                right: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        // source index for each output element
        let map = strided_indices(&out_shape, &strides);
        let out: Vec<T> = {
            let x = self.data();
            map.iter().map(|&i| x[i]).collect()
        };
        Ok(Tensor::from_op(out, out_shape, "permute", vec![self.clone()], move |g, inputs| {
            let mut gx = vec![T::zero(); inputs[0].numel()];
            for (o, &i) in map.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        }))
    }

    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::Dimension {
                op: "transpose",
                left: self.shape().to_vec(),
                right: vec![],
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    /// Broadcasts to a larger shape; gradients are summed back.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape("broadcast_to", self.shape(), shape)?;
        if out_shape != shape {
            return Err(Error::Dimension {
                op: "broadcast_to",
                left: self.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let map = broadcast_indices(self.shape(), shape);
        let out: Vec<T> = {
            let x = self.data();
            map.iter().map(|&i| x[i]).collect()
        };
        Ok(Tensor::from_op(out, shape.to_vec(), "broadcast_to", vec![self.clone()], move |g, inputs| {
            let mut gx = vec![T::zero(); inputs[0].numel()];
            for (o, &i) in map.iter().enumerate() {
                gx[i] += g[o];
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::contract(format!("concat axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total);
        {
            let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (d, &w) in datas.iter().zip(&widths) {
                    out.extend_from_slice(&d[o * w..(o + 1) * w]);
                }
            }
        }
        let inputs: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op(out, shape, "concat", inputs, move |g, inputs| {
            let mut grads: Vec<Option<Vec<T>>> = inputs
                .iter()
                .map(|t| t.tracks().then(|| Vec::with_capacity(t.numel())))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(v) = gi {
                        v.extend_from_slice(&g[pos..pos + w]);
                    }
                    pos += w;
                }
            }
            grads
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                left: shape,
                right: vec![axis, start, len],
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                let base = o * full + start * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(Tensor::from_op(out, out_shape, "narrow", vec![self.clone()], move |g, inputs| {
            let mut gx = vec![T::zero(); inputs[0].numel()];
            for o in 0..outer {
                let base = o * full + start * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Gathers rows of a `[rows, d]` table.
    pub fn index_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::contract(format!("index_rows expects a 2-d table, got {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("row index {bad} out of range for table of {rows} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        {
            let x = self.data();
            for &i in ids {
                out.extend_from_slice(&x[i * d..(i + 1) * d]);
            }
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(out, vec![ids.len(), d], "index_rows", vec![self.clone()], move |g, inputs| {
            let mut gx = vec![T::zero(); inputs[0].numel()];
            for (r, &i) in ids.iter().enumerate() {
                for c in 0..d {
                    gx[i * d + c] += g[r * d + c];
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Inverted dropout: zeroes entries with probability `p`, scales survivors by `1/(1-p)`.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng) -> Tensor<T> {
        if p <= 0.0 {
            return self.clone();
        }
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Tensor::from_op(out, self.shape().to_vec(), "dropout", vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(&mask).map(|(&a, &m)| a * m).collect())]
        })
    }
}

fn strided_indices(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        out.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < shape[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    out
}

// ── Kernels ──────────────────────────────────────────────────────────

/// c[m,n] += a[m,k] · b[k,n]
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// c[m,k] += g[m,n] · b[k,n]ᵀ
fn gemm_nt<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · g[m,n]
fn gemm_tn<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += aip * gv;
            }
        }
    }
}

/// Boolean mask over the trailing dims of a logits tensor; `true` marks a
/// position that must receive zero probability.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub masked: Vec<bool>,
}

impl Mask {
    pub fn new(masked: Vec<bool>, shape: &[usize]) -> Result<Self> {
        if masked.len() != numel(shape) {
            return Err(Error::Dimension {
                op: "mask",
                left: vec![masked.len()],
                right: shape.to_vec(),
            });
        }
        Ok(Mask {
            shape: shape.to_vec(),
            masked,
        })
    }

    /// Lower-triangular attention: query `i` may see keys `j <= i`.
    pub fn causal(len: usize) -> Self {
        let masked = (0..len * len).map(|idx| idx % len > idx / len).collect();
        Mask {
            shape: vec![len, len],
            masked,
        }
    }
}

/// Mean squared error between equal-length tensors.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::contract(format!(
            "mse shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.sub(target)?.square().mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::no_grad;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    fn p(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let col = t(&[3.0, 4.0], &[2, 1]);
        assert_eq!(eye.matmul(&col).unwrap().to_vec(), vec![3.0, 4.0]);
        let row = t(&[1.0, 2.0], &[1, 2]);
        let out = row.matmul(&col).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_gradient_wrt_left() {
        let a = p(&[1.0, 2.0], &[1, 2]);
        let b = t(&[3.0, 4.0], &[2, 1]);
        a.matmul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[1.0; 6], &[2, 3]);
        let b = t(&[1.0; 4], &[2, 2]);
        match a.matmul(&b).unwrap_err() {
            Error::Dimension { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2]);
        let b = t(&[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0], &[2, 2, 2]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 6.0, 5.0, 8.0, 7.0]);
    }

    #[test]
    fn sigmoid_values() {
        let x = t(&[0.0, 50.0, -50.0, 3.0], &[4]);
        let y = x.sigmoid().to_vec();
        assert_eq!(y[0], 0.5);
        assert!(y.iter().all(|&v| v > 0.0 && v <= 1.0));
        assert!(y[2] > 0.0);
        let x = p(&[0.0], &[1]);
        x.sigmoid().sum().backward().unwrap();
        assert!((x.grad().unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn broadcasting_trailing_dims() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0, 30.0], &[3]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let col = t(&[1.0, 2.0], &[2, 1]);
        assert_eq!(a.mul(&col).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 8.0, 10.0, 12.0]);
        let bad = t(&[1.0, 2.0], &[2]);
        assert!(matches!(a.add(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_axes() {
        let a = p(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = p(&[1.0, 1.0, 1.0], &[3]);
        a.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn softmax_examples() {
        let x = t(&[0.0, 0.0], &[2]);
        assert_eq!(x.softmax_lastdim(None).unwrap().to_vec(), vec![0.5, 0.5]);
        let x = t(&[1f64.ln(), 3f64.ln()], &[2]);
        let y = x.softmax_lastdim(None).unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-12 && (y[1] - 0.75).abs() < 1e-12);
        let x = t(&[5.0, 123.0], &[1, 2]);
        let m = Mask::new(vec![false, true], &[1, 2]).unwrap();
        assert_eq!(x.softmax_lastdim(Some(&m)).unwrap().to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_all_masked_row_is_singular() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let m = Mask::new(vec![false, false, true, true], &[2, 2]).unwrap();
        assert!(matches!(x.softmax_lastdim(Some(&m)), Err(Error::SingularRow { row: 1 })));
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let x = t(&[0.3, -1.0, 2.0, 0.1, 0.0, 5.0, 1.0, 1.0, 1.0], &[3, 3]);
        let y = x.softmax_lastdim(Some(&Mask::causal(3))).unwrap().to_vec();
        assert_eq!(y[0], 1.0);
        assert_eq!(&y[1..3], &[0.0, 0.0]);
        assert_eq!(y[5], 0.0);
        for r in 0..3 {
            let s: f64 = y[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let g = t(&[1.0; 3], &[3]);
        let b = t(&[0.0; 3], &[3]);
        let y = t(&[1.0, 1.0, 1.0], &[3]).layer_norm(&g, &b, 1e-5).unwrap().to_vec();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
        let g = t(&[1.0; 2], &[2]);
        let b = t(&[0.0; 2], &[2]);
        let y = t(&[1.0, 3.0], &[2]).layer_norm(&g, &b, 1e-5).unwrap().to_vec();
        assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn backward_examples() {
        let x = p(&[1.0, 2.0], &[2]);
        let unused = p(&[7.0], &[1]);
        let loss = x.square().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
        assert!(unused.grad().is_none_or(|g| g == vec![0.0]));
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = p(&[1.0, 2.0], &[2]);
        assert!(matches!(x.square().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn record_is_topological() {
        let x = p(&[1.0, 2.0], &[2]);
        let y = x.sigmoid();
        let z = y.mul(&x).unwrap().add(&y).unwrap().sum();
        let rec = z.record();
        assert_eq!(rec.len(), 4);
        assert!(rec.is_topological());
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = p(&[1.0, 2.0], &[2]);
        let y = no_grad(|| x.square().sum());
        assert!(y.is_leaf() && !y.tracks());
    }

    #[test]
    fn shape_ops_roundtrip() {
        let x = t(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 3, 4]);
        let y = x.permute(&[1, 0, 2]).unwrap();
        assert_eq!(y.shape(), &[3, 2, 4]);
        assert_eq!(&y.to_vec()[..8], &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        let back = y.permute(&[1, 0, 2]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
        let parts = [&x.narrow(1, 0, 1).unwrap(), &x.narrow(1, 1, 2).unwrap()];
        assert_eq!(Tensor::concat(&parts, 1).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn elementwise_dispatch_checks_arity() {
        let x = t(&[0.0], &[1]);
        assert!(elementwise(ElementwiseOp::Add, &[&x]).is_err());
        assert_eq!(elementwise(ElementwiseOp::Sigmoid, &[&x]).unwrap().to_vec(), vec![0.5]);
    }

    #[test]
    fn dropout_is_identity_at_zero_rate() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = t(&[1.0, 2.0, 3.0], &[3]);
        assert!(x.dropout(0.0, &mut rng).same_storage(&x));
        let y = x.dropout(0.5, &mut rng).to_vec();
        assert!(y.iter().zip([1.0, 2.0, 3.0]).all(|(&a, b)| a == 0.0 || a == 2.0 * b));
    }
}
