//! Elementwise, shape, reduction and linear-algebra operations.

use super::{ordered_sum, BackwardCtx, Tensor};
use crate::{Error, Real, Result};

/// Row-major strides.
pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes; a dimension may match or be 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for d in 0..ndim {
        let da = if d + a.len() >= ndim { a[d + a.len() - ndim] } else { 1 };
        let db = if d + b.len() >= ndim { b[d + b.len() - ndim] } else { 1 };
        if da == db || da == 1 || db == 1 {
            out[d] = da.max(db);
        } else {
            return Err(Error::shape(
                "broadcast",
                format!("compatible shapes, got {a:?}"),
                format!("{b:?}"),
            ));
        }
    }
    Ok(out)
}

/// Per-dimension strides of `shape` viewed inside the broadcast frame `out`;
/// broadcast dimensions get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let native = strides_for(shape);
    let ndim = out.len();
    let mut s = vec![0usize; ndim];
    for d in 0..ndim {
        if d + shape.len() >= ndim {
            let sd = d + shape.len() - ndim;
            s[d] = if shape[sd] == 1 { 0 } else { native[sd] };
        }
    }
    s
}

/// Visit every element of the broadcast frame, yielding the linear offsets
/// into the two operands.
fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out_shape.iter().product();
    let ndim = out_shape.len();
    let mut idx = vec![0usize; ndim];
    for i in 0..n {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..ndim {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        f(i, ia, ib);
        for d in (0..ndim).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Decompose an axis reduction into (outer, lane length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfBounds { axis, rank: shape.len() });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

enum Binary {
    Add,
    Sub,
    Mul,
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: Binary) -> Result<Tensor> {
        let a = self.data();
        let b = other.data();
        if self.shape() == other.shape() {
            let data: Vec<Real> = match op {
                Binary::Add => a.iter().zip(b.iter()).map(|(x, y)| x + y).collect(),
                Binary::Sub => a.iter().zip(b.iter()).map(|(x, y)| x - y).collect(),
                Binary::Mul => a.iter().zip(b.iter()).map(|(x, y)| x * y).collect(),
            };
            drop(a);
            drop(b);
            let shape = self.shape().to_vec();
            let backward = move |ctx: &BackwardCtx| {
                let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
                match op {
                    Binary::Add => {
                        if pa.requires_grad() {
                            pa.accumulate_grad(ctx.grad);
                        }
                        if pb.requires_grad() {
                            pb.accumulate_grad(ctx.grad);
                        }
                    }
                    Binary::Sub => {
                        if pa.requires_grad() {
                            pa.accumulate_grad(ctx.grad);
                        }
                        if pb.requires_grad() {
                            let neg: Vec<Real> = ctx.grad.iter().map(|g| -g).collect();
                            pb.accumulate_grad(&neg);
                        }
                    }
                    Binary::Mul => {
                        if pa.requires_grad() {
                            let bd = pb.data();
                            let buf: Vec<Real> =
                                ctx.grad.iter().zip(bd.iter()).map(|(g, y)| g * y).collect();
                            drop(bd);
                            pa.accumulate_grad(&buf);
                        }
                        if pb.requires_grad() {
                            let ad = pa.data();
                            let buf: Vec<Real> =
                                ctx.grad.iter().zip(ad.iter()).map(|(g, x)| g * x).collect();
                            drop(ad);
                            pb.accumulate_grad(&buf);
                        }
                    }
                }
            };
            return Ok(Tensor::from_op(
                shape,
                data,
                vec![self.clone(), other.clone()],
                Box::new(backward),
            ));
        }

        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let sa = broadcast_strides(self.shape(), &out_shape);
        let sb = broadcast_strides(other.shape(), &out_shape);
        let n: usize = out_shape.iter().product();
        let mut data = vec![0.0; n];
        for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| {
            data[i] = match op {
                Binary::Add => a[ia] + b[ib],
                Binary::Sub => a[ia] - b[ib],
                Binary::Mul => a[ia] * b[ib],
            };
        });
        drop(a);
        drop(b);
        let shape_for_bw = out_shape.clone();
        let backward = move |ctx: &BackwardCtx| {
            let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
            let mut ga = vec![0.0; pa.len()];
            let mut gb = vec![0.0; pb.len()];
            {
                let ad = pa.data();
                let bd = pb.data();
                for_each_broadcast(&shape_for_bw, &sa, &sb, |i, ia, ib| {
                    let g = ctx.grad[i];
                    match op {
                        Binary::Add => {
                            ga[ia] += g;
                            gb[ib] += g;
                        }
                        Binary::Sub => {
                            ga[ia] += g;
                            gb[ib] -= g;
                        }
                        Binary::Mul => {
                            ga[ia] += g * bd[ib];
                            gb[ib] += g * ad[ia];
                        }
                    }
                });
            }
            if pa.requires_grad() {
                pa.accumulate_grad(&ga);
            }
            if pb.requires_grad() {
                pb.accumulate_grad(&gb);
            }
        };
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(backward),
        ))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Add)
    }

    /// Elementwise difference with right-aligned broadcasting.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Sub)
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Mul)
    }

    fn map_unary(
        &self,
        f: impl Fn(Real) -> Real,
        dfdx: impl Fn(Real, Real) -> Real + 'static,
    ) -> Tensor {
        let data: Vec<Real> = self.data().iter().map(|&x| f(x)).collect();
        let shape = self.shape().to_vec();
        let backward = move |ctx: &BackwardCtx| {
            let p = &ctx.parents[0];
            if !p.requires_grad() {
                return;
            }
            let x = p.data();
            let buf: Vec<Real> = ctx
                .grad
                .iter()
                .zip(x.iter().zip(ctx.out.iter()))
                .map(|(g, (&xi, &yi))| g * dfdx(xi, yi))
                .collect();
            drop(x);
            p.accumulate_grad(&buf);
        };
        Tensor::from_op(shape, data, vec![self.clone()], Box::new(backward))
    }

    pub fn add_scalar(&self, c: Real) -> Tensor {
        self.map_unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: Real) -> Tensor {
        self.map_unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.map_unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Numerically stable logistic function.
    pub fn sigmoid(&self) -> Tensor {
        self.map_unary(stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.map_unary(Real::tanh, |_, y| 1.0 - y * y)
    }

    /// `ln(1 + exp(x))`, evaluated without overflow for large |x|.
    pub fn softplus(&self) -> Tensor {
        self.map_unary(stable_softplus, |x, _| stable_sigmoid(x))
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary(Real::exp, |_, y| y)
    }

    /// Natural logarithm; the caller is responsible for positive inputs.
    pub fn ln(&self) -> Tensor {
        self.map_unary(Real::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Tensor {
        self.map_unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Softmax along `axis`. Each lane subtracts its maximum before
    /// exponentiation, and the normalizer is accumulated in value order, so a
    /// lane's output depends only on the multiset of its inputs.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, lane, inner) = axis_extents(self.shape(), axis)?;
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        let mut scratch = vec![0.0; lane];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut m = Real::NEG_INFINITY;
                for j in 0..lane {
                    m = m.max(x[base + j * inner]);
                }
                for j in 0..lane {
                    scratch[j] = (x[base + j * inner] - m).exp();
                }
                let mut sorted = scratch.clone();
                let denom = ordered_sum(&mut sorted);
                for j in 0..lane {
                    data[base + j * inner] = scratch[j] / denom;
                }
            }
        }
        drop(x);
        let shape = self.shape().to_vec();
        let backward = move |ctx: &BackwardCtx| {
            let p = &ctx.parents[0];
            if !p.requires_grad() {
                return;
            }
            let s = ctx.out;
            let g = ctx.grad;
            let mut buf = vec![0.0; s.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut dot = 0.0;
                    for j in 0..lane {
                        let k = base + j * inner;
                        dot += g[k] * s[k];
                    }
                    for j in 0..lane {
                        let k = base + j * inner;
                        buf[k] = s[k] * (g[k] - dot);
                    }
                }
            }
            p.accumulate_grad(&buf);
        };
        Ok(Tensor::from_op(shape, data, vec![self.clone()], Box::new(backward)))
    }

    /// `ln(softmax)` along `axis`, computed in one stable pass.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, lane, inner) = axis_extents(self.shape(), axis)?;
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        let mut scratch = vec![0.0; lane];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut m = Real::NEG_INFINITY;
                for j in 0..lane {
                    m = m.max(x[base + j * inner]);
                }
                for j in 0..lane {
                    scratch[j] = (x[base + j * inner] - m).exp();
                }
                let log_denom = ordered_sum(&mut scratch).ln();
                for j in 0..lane {
                    data[base + j * inner] = x[base + j * inner] - m - log_denom;
                }
            }
        }
        drop(x);
        let shape = self.shape().to_vec();
        let backward = move |ctx: &BackwardCtx| {
            let p = &ctx.parents[0];
            if !p.requires_grad() {
                return;
            }
            let g = ctx.grad;
            let mut buf = vec![0.0; ctx.out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut gsum = 0.0;
                    for j in 0..lane {
                        gsum += g[base + j * inner];
                    }
                    for j in 0..lane {
                        let k = base + j * inner;
                        buf[k] = g[k] - ctx.out[k].exp() * gsum;
                    }
                }
            }
            p.accumulate_grad(&buf);
        };
        Ok(Tensor::from_op(shape, data, vec![self.clone()], Box::new(backward)))
    }

    /// Matrix product of `[m, k]` by `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shape(
                "matmul",
                "[m, k] x [k, n]",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let a = self.data();
        let b = other.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut data[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        let backward = move |ctx: &BackwardCtx| {
            let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
            let g = ctx.grad;
            if pa.requires_grad() {
                let bd = pb.data();
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                drop(bd);
                pa.accumulate_grad(&ga);
            }
            if pb.requires_grad() {
                let ad = pa.data();
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            brow[j] += av * grow[j];
                        }
                    }
                }
                drop(ad);
                pb.accumulate_grad(&gb);
            }
        };
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(backward),
        ))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "at least one tensor", "empty list"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::AxisOutOfBounds { axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::shape("concat", format!("rank {rank}"), format!("rank {}", p.rank())));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(Error::shape(
                        "concat",
                        format!("{:?} away from axis {axis}", first.shape()),
                        format!("{:?}", p.shape()),
                    ));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let la = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                let src = &pd[o * la * inner..(o + 1) * la * inner];
                let dst_base = (o * axis_total + offset) * inner;
                data[dst_base..dst_base + la * inner].copy_from_slice(src);
            }
            spans.push((offset, la));
            offset += la;
        }
        let backward = move |ctx: &BackwardCtx| {
            for (p, &(start, la)) in ctx.parents.iter().zip(&spans) {
                if !p.requires_grad() {
                    continue;
                }
                let mut buf = vec![0.0; p.len()];
                for o in 0..outer {
                    let src_base = (o * axis_total + start) * inner;
                    buf[o * la * inner..(o + 1) * la * inner]
                        .copy_from_slice(&ctx.grad[src_base..src_base + la * inner]);
                }
                p.accumulate_grad(&buf);
            }
        };
        Ok(Tensor::from_op(out_shape, data, parts.to_vec(), Box::new(backward)))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (outer, lane, inner) = axis_extents(self.shape(), axis)?;
        if start + len > lane {
            return Err(Error::shape(
                "slice",
                format!("range within axis length {lane}"),
                format!("{start}..{}", start + len),
            ));
        }
        let x = self.data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * lane + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&x[src_base..src_base + len * inner]);
        }
        drop(x);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let backward = move |ctx: &BackwardCtx| {
            let p = &ctx.parents[0];
            if !p.requires_grad() {
                return;
            }
            let mut buf = vec![0.0; p.len()];
            for o in 0..outer {
                let dst_base = (o * lane + start) * inner;
                buf[dst_base..dst_base + len * inner]
                    .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            p.accumulate_grad(&buf);
        };
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], Box::new(backward)))
    }

    /// Same data in row-major order under a new shape.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.len()),
                format!("{new_shape:?} = {n}"),
            ));
        }
        let backward = |ctx: &BackwardCtx| {
            let p = &ctx.parents[0];
            if p.requires_grad() {
                p.accumulate_grad(ctx.grad);
            }
        };
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(backward),
        ))
    }

    /// Reorder dimensions: output dimension `d` is input dimension `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("permutation of 0..{rank}"),
                format!("{perm:?}"),
            ));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides_for(&in_shape);
        let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let x = self.data();
        let n = x.len();
        let mut data = vec![0.0; n];
        let mut idx = vec![0usize; rank];
        for out_i in 0..n {
            let mut src = 0;
            for d in 0..rank {
                src += idx[d] * gather[d];
            }
            data[out_i] = x[src];
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        drop(x);
        let out_shape_bw = out_shape.clone();
        let backward = move |ctx: &BackwardCtx| {
            let p = &ctx.parents[0];
            if !p.requires_grad() {
                return;
            }
            let mut buf = vec![0.0; p.len()];
            let mut idx = vec![0usize; rank];
            for out_i in 0..buf.len() {
                let mut src = 0;
                for d in 0..rank {
                    src += idx[d] * gather[d];
                }
                buf[src] = ctx.grad[out_i];
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < out_shape_bw[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            p.accumulate_grad(&buf);
        };
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], Box::new(backward)))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: Real = self.data().iter().sum();
        let backward = |ctx: &BackwardCtx| {
            let p = &ctx.parents[0];
            if p.requires_grad() {
                p.accumulate_grad(&vec![ctx.grad[0]; p.len()]);
            }
        };
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], Box::new(backward))
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.len() as Real;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum along `axis`, removing it. Each output lane is accumulated in value
    /// order, so the result depends only on the multiset of lane entries.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, lane, inner) = axis_extents(self.shape(), axis)?;
        let x = self.data();
        let mut data = vec![0.0; outer * inner];
        let mut scratch = vec![0.0; lane];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                for j in 0..lane {
                    scratch[j] = x[base + j * inner];
                }
                data[o * inner + i] = ordered_sum(&mut scratch);
            }
        }
        drop(x);
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let backward = move |ctx: &BackwardCtx| {
            let p = &ctx.parents[0];
            if !p.requires_grad() {
                return;
            }
            let mut buf = vec![0.0; p.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let g = ctx.grad[o * inner + i];
                    let base = o * lane * inner + i;
                    for j in 0..lane {
                        buf[base + j * inner] = g;
                    }
                }
            }
            p.accumulate_grad(&buf);
        };
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], Box::new(backward)))
    }

    /// Normalize each lane along `axis` to zero mean and unit variance, then
    /// apply the per-position affine `gamma * x + beta`. `gamma` and `beta`
    /// have length `shape[axis]`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, axis: usize, eps: Real) -> Result<Tensor> {
        let (outer, lane, inner) = axis_extents(self.shape(), axis)?;
        if gamma.shape() != [lane] || beta.shape() != [lane] {
            return Err(Error::shape(
                "layer norm",
                format!("gamma/beta of shape [{lane}]"),
                format!("{:?} / {:?}", gamma.shape(), beta.shape()),
            ));
        }
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut data = vec![0.0; x.len()];
        // Normalized values and reciprocal std are recomputed cheaply in the
        // backward pass from the cached statistics.
        let mut means = vec![0.0; outer * inner];
        let mut inv_stds = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mean = 0.0;
                for j in 0..lane {
                    mean += x[base + j * inner];
                }
                mean /= lane as Real;
                let mut var = 0.0;
                for j in 0..lane {
                    let d = x[base + j * inner] - mean;
                    var += d * d;
                }
                var /= lane as Real;
                let inv_std = 1.0 / (var + eps).sqrt();
                means[o * inner + i] = mean;
                inv_stds[o * inner + i] = inv_std;
                for j in 0..lane {
                    let xh = (x[base + j * inner] - mean) * inv_std;
                    data[base + j * inner] = gm[j] * xh + bt[j];
                }
            }
        }
        drop(x);
        drop(gm);
        drop(bt);
        let shape = self.shape().to_vec();
        let backward = move |ctx: &BackwardCtx| {
            let (px, pg, pb) = (&ctx.parents[0], &ctx.parents[1], &ctx.parents[2]);
            let x = px.data();
            let gm = pg.data();
            let g = ctx.grad;
            let mut gx = vec![0.0; x.len()];
            let mut ggamma = vec![0.0; gm.len()];
            let mut gbeta = vec![0.0; gm.len()];
            let nl = lane as Real;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mean = means[o * inner + i];
                    let inv_std = inv_stds[o * inner + i];
                    // dL/dxh per element, then the standard two-correction form.
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..lane {
                        let k = base + j * inner;
                        let xh = (x[k] - mean) * inv_std;
                        let dxh = g[k] * gm[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        ggamma[j] += g[k] * xh;
                        gbeta[j] += g[k];
                    }
                    for j in 0..lane {
                        let k = base + j * inner;
                        let xh = (x[k] - mean) * inv_std;
                        let dxh = g[k] * gm[j];
                        gx[k] = inv_std * (dxh - sum_dxh / nl - xh * sum_dxh_xh / nl);
                    }
                }
            }
            drop(x);
            drop(gm);
            if px.requires_grad() {
                px.accumulate_grad(&gx);
            }
            if pg.requires_grad() {
                pg.accumulate_grad(&ggamma);
            }
            if pb.requires_grad() {
                pb.accumulate_grad(&gbeta);
            }
        };
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(backward),
        ))
    }

    /// Elementwise smooth-L1 (Huber) distance to `target` with threshold
    /// `beta`: quadratic inside `|d| < beta`, linear outside.
    pub fn smooth_l1(&self, target: &Tensor, beta: Real) -> Result<Tensor> {
        if self.shape() != target.shape() {
            return Err(Error::shape(
                "smooth l1",
                format!("{:?}", self.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        assert!(beta > 0.0, "smooth_l1 threshold must be positive");
        let p = self.data();
        let t = target.data();
        let data: Vec<Real> = p
            .iter()
            .zip(t.iter())
            .map(|(&pi, &ti)| {
                let d = pi - ti;
                if d.abs() < beta {
                    0.5 * d * d / beta
                } else {
                    d.abs() - 0.5 * beta
                }
            })
            .collect();
        drop(p);
        drop(t);
        let shape = self.shape().to_vec();
        let backward = move |ctx: &BackwardCtx| {
            let (pp, pt) = (&ctx.parents[0], &ctx.parents[1]);
            let p = pp.data();
            let t = pt.data();
            let buf: Vec<Real> = ctx
                .grad
                .iter()
                .zip(p.iter().zip(t.iter()))
                .map(|(g, (&pi, &ti))| {
                    let d = pi - ti;
                    g * (d / beta).clamp(-1.0, 1.0)
                })
                .collect();
            drop(p);
            drop(t);
            if pp.requires_grad() {
                pp.accumulate_grad(&buf);
            }
            if pt.requires_grad() {
                let neg: Vec<Real> = buf.iter().map(|v| -v).collect();
                pt.accumulate_grad(&neg);
            }
        };
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), target.clone()],
            Box::new(backward),
        ))
    }
}

pub(crate) fn stable_sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[Real], b: &[Real], tol: Real) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn add_broadcasts_vector_over_rows() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn broadcast_mul_backward_reduces_over_expanded_axes() {
        let a = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = a.mul(&w).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![10.0]); // sum of a
        assert_eq!(a.grad().unwrap(), vec![3.0; 4]);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.5]).unwrap();
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.5]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = Tensor::from_vec(&[2], vec![750.0, -750.0]).unwrap();
        let y = x.sigmoid().to_vec();
        assert_eq!(y[0], 1.0);
        assert!(y[1] >= 0.0 && y[1] < 1e-300);
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        let x = Tensor::from_vec(&[3], vec![1000.0, 0.0, -1000.0]).unwrap();
        let y = x.softplus().to_vec();
        assert_eq!(y[0], 1000.0);
        assert!((y[1] - (2.0 as Real).ln()).abs() < 1e-12);
        assert_eq!(y[2], 0.0);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let x = Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap();
        let y = x.softmax(0).unwrap().to_vec();
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let y = x.softmax(1).unwrap().to_vec();
        assert!((y[0..3].iter().sum::<Real>() - 1.0).abs() < 1e-12);
        assert_close(&y[3..6], &[1.0 / 3.0; 3], 1e-12);
    }

    #[test]
    fn softmax_output_ignores_lane_permutation() {
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 0.9]).unwrap();
        let y = x.softmax(0).unwrap().to_vec();
        let xp = Tensor::from_vec(&[3], vec![0.9, 0.3, -1.2]).unwrap();
        let yp = xp.softmax(0).unwrap().to_vec();
        assert_eq!(y[0].to_bits(), yp[1].to_bits());
        assert_eq!(y[1].to_bits(), yp[2].to_bits());
        assert_eq!(y[2].to_bits(), yp[0].to_bits());
    }

    #[test]
    fn log_softmax_matches_ln_of_softmax() {
        let x = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let a = x.log_softmax(0).unwrap().to_vec();
        let b: Vec<Real> = x.softmax(0).unwrap().to_vec().iter().map(|v| v.ln()).collect();
        assert_close(&a, &b, 1e-12);
    }

    #[test]
    fn matmul_identity_is_identity() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&i).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        assert_eq!(c.slice_axis(1, 0, 2).unwrap().to_vec(), a.to_vec());
        assert_eq!(c.slice_axis(1, 2, 3).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn permute_transposes_matrix() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = t.permute(&[1, 0]).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn sum_axis_collapses_one_dimension() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.sum_axis(0).unwrap().to_vec(), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.sum_axis(1).unwrap().to_vec(), vec![6.0, 15.0]);
    }

    #[test]
    fn layer_norm_of_affine_lane_is_normalized() {
        let x = Tensor::from_vec(&[4], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let gamma = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        let beta = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 0, 1e-5).unwrap().to_vec();
        let mean: Real = y.iter().sum::<Real>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let var: Real = y.iter().map(|v| v * v).sum::<Real>() / 4.0;
        assert!((var - 1.0).abs() < 1e-4); // eps shrinks the variance slightly
    }

    #[test]
    fn layer_norm_constant_lane_maps_to_beta() {
        let x = Tensor::from_vec(&[2, 3], vec![5.0; 6]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![2.0, 2.0]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 0, 1e-5).unwrap().to_vec();
        assert_close(&y, &[0.5, 0.5, 0.5, -0.5, -0.5, -0.5], 1e-12);
    }

    #[test]
    fn smooth_l1_quadratic_and_linear_regimes() {
        let p = Tensor::from_vec(&[3], vec![0.5, 2.0, -3.0]).unwrap();
        let t = Tensor::zeros(&[3]);
        let y = p.smooth_l1(&t, 1.0).unwrap().to_vec();
        assert_close(&y, &[0.125, 1.5, 2.5], 1e-12);
    }

    #[test]
    fn reshape_preserves_order() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = a.reshape(&[3, 2]).unwrap();
        assert_eq!(b.to_vec(), a.to_vec());
        assert!(a.reshape(&[4]).is_err());
    }
}
