//! The differentiable operation catalog.
//!
//! Each op computes its output eagerly and, when any input needs a gradient,
//! attaches a backward closure that accumulates into its parents. Backward
//! math runs on raw value snapshots taken at forward time, so later in-place
//! parameter updates cannot corrupt a pending graph.

use super::kernels::{
    axis_blocks, binary_broadcast, broadcast_shapes, matmul as matmul_raw, numel, reduce_to_shape,
    swap_axes,
};
use super::{shape_err, Scalar, Tensor, TensorError};
use crate::rng::RngStream;

impl<F: Scalar> Tensor<F> {
    fn binary(
        &self,
        other: &Tensor<F>,
        op: &'static str,
        f: impl Fn(F, F) -> F,
        grad_a: impl Fn(&[F], &[usize], &[F], &[F]) -> Vec<F> + 'static,
        grad_b: impl Fn(&[F], &[usize], &[F], &[F]) -> Vec<F> + 'static,
    ) -> Result<Tensor<F>, TensorError> {
        let a_shape = self.shape().to_vec();
        let b_shape = other.shape().to_vec();
        let out_shape = broadcast_shapes(&a_shape, &b_shape).map_err(|(axis, da, db)| {
            shape_err(op, format!("{a_shape:?} vs {b_shape:?} at axis {axis} from the right ({da} vs {db})"))
        })?;
        let a_vals = self.to_vec();
        let b_vals = other.to_vec();
        let out = binary_broadcast(&a_vals, &a_shape, &b_vals, &b_shape, &out_shape, f);

        let (a, b) = (self.clone(), other.clone());
        let (osh, ash, bsh) = (out_shape.clone(), a_shape, b_shape);
        Ok(Tensor::from_op(out_shape, out, vec![self.clone(), other.clone()], move |dy| {
            if a.needs_grad() {
                let full = grad_a(dy, &osh, &a_vals, &b_vals);
                a.accumulate_grad(&reduce_to_shape(&full, &osh, &ash));
            }
            if b.needs_grad() {
                let full = grad_b(dy, &osh, &a_vals, &b_vals);
                b.accumulate_grad(&reduce_to_shape(&full, &osh, &bsh));
            }
        }))
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.binary(
            other,
            "add",
            |x, y| x + y,
            |dy, _, _, _| dy.to_vec(),
            |dy, _, _, _| dy.to_vec(),
        )
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.binary(
            other,
            "sub",
            |x, y| x - y,
            |dy, _, _, _| dy.to_vec(),
            |dy, _, _, _| dy.iter().map(|&g| -g).collect(),
        )
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let ash = self.shape().to_vec();
        let bsh = other.shape().to_vec();
        self.binary(
            other,
            "mul",
            |x, y| x * y,
            move |dy, osh, _, bv| binary_broadcast(dy, osh, bv, &bsh, osh, |g, y| g * y),
            move |dy, osh, av, _| binary_broadcast(dy, osh, av, &ash, osh, |g, x| g * x),
        )
    }

    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let a_shape = self.shape().to_vec();
        let b_shape = other.shape().to_vec();
        let a_vals = self.to_vec();
        let b_vals = other.to_vec();
        let (out, out_shape) =
            matmul_raw(&a_vals, &a_shape, &b_vals, &b_shape).map_err(|detail| shape_err("matmul", detail))?;

        let (a, b) = (self.clone(), other.clone());
        let osh = out_shape.clone();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone(), other.clone()], move |dy| {
            let rank_a = a_shape.len();
            let rank_b = b_shape.len();
            if a.needs_grad() {
                // dA = dY . B^T, reduced over broadcast batch dims.
                let (bt, bt_shape) = swap_axes(&b_vals, &b_shape, rank_b - 2, rank_b - 1);
                let (da, da_shape) = matmul_raw(dy, &osh, &bt, &bt_shape).expect("backward matmul shapes");
                a.accumulate_grad(&reduce_to_shape(&da, &da_shape, &a_shape));
            }
            if b.needs_grad() {
                let (at, at_shape) = swap_axes(&a_vals, &a_shape, rank_a - 2, rank_a - 1);
                let (db, db_shape) = matmul_raw(&at, &at_shape, dy, &osh).expect("backward matmul shapes");
                b.accumulate_grad(&reduce_to_shape(&db, &db_shape, &b_shape));
            }
        }))
    }

    fn unary(
        &self,
        f: impl Fn(F) -> F,
        // d out / d in as a function of (input value, output value)
        df: impl Fn(F, F) -> F + 'static,
    ) -> Tensor<F> {
        let x_vals = self.to_vec();
        let out: Vec<F> = x_vals.iter().map(|&v| f(v)).collect();
        let out_vals = out.clone();
        let x = self.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |dy| {
            if x.needs_grad() {
                let contrib: Vec<F> = dy
                    .iter()
                    .zip(x_vals.iter().zip(&out_vals))
                    .map(|(&g, (&xi, &yi))| g * df(xi, yi))
                    .collect();
                x.accumulate_grad(&contrib);
            }
        })
    }

    pub fn abs(&self) -> Tensor<F> {
        self.unary(
            |v| v.abs(),
            |x, _| {
                if x > F::zero() {
                    F::one()
                } else if x < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        self.unary(
            |v| F::one() / (F::one() + (-v).exp()),
            |_, s| s * (F::one() - s),
        )
    }

    pub fn relu(&self) -> Tensor<F> {
        self.unary(
            |v| v.maximum(F::zero()),
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn tanh(&self) -> Tensor<F> {
        self.unary(|v| v.tanh(), |_, t| F::one() - t * t)
    }

    pub fn log(&self) -> Tensor<F> {
        self.unary(|v| v.ln(), |x, _| F::one() / x)
    }

    pub fn exp(&self) -> Tensor<F> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        self.unary(move |v| v * c, move |_, _| c)
    }

    /// Softmax along `axis`; rows sum to 1. Internally max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_blocks(&shape, axis);
        let x = self.to_vec();
        let mut out = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = x[at(0)];
                for a in 1..len {
                    max = max.maximum(x[at(a)]);
                }
                let mut denom = F::zero();
                for a in 0..len {
                    let e = (x[at(a)] - max).exp();
                    out[at(a)] = e;
                    denom += e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / denom;
                }
            }
        }
        let s_vals = out.clone();
        let parent = self.clone();
        Ok(Tensor::from_op(shape.clone(), out, vec![self.clone()], move |dy| {
            if !parent.needs_grad() {
                return;
            }
            let mut dx = vec![F::zero(); dy.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mut dot = F::zero();
                    for a in 0..len {
                        dot += dy[at(a)] * s_vals[at(a)];
                    }
                    for a in 0..len {
                        dx[at(a)] = s_vals[at(a)] * (dy[at(a)] - dot);
                    }
                }
            }
            parent.accumulate_grad(&dx);
        }))
    }

    /// Numerically stable log(softmax(x)) along `axis`, built from catalog
    /// ops plus a detached per-row max (exact by shift invariance).
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err("log_softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_blocks(&shape, axis);
        let x = self.values();
        let mut maxes = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = x[(o * len) * inner + i];
                for a in 1..len {
                    m = m.maximum(x[(o * len + a) * inner + i]);
                }
                maxes[o * inner + i] = m;
            }
        }
        drop(x);
        let mut max_shape = shape.clone();
        max_shape[axis] = 1;
        let max_const = Tensor::from_vec(max_shape, maxes)?;
        let shifted = self.sub(&max_const)?;
        let lse = shifted.exp().sum(Some(axis), true)?.log();
        shifted.sub(&lse)
    }

    /// Sum over one axis (or all elements when `axis` is `None`).
    pub fn sum(&self, axis: Option<usize>, keepdims: bool) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape().to_vec();
        let x = self.to_vec();
        match axis {
            None => {
                let mut total = F::zero();
                for &v in &x {
                    total += v;
                }
                let out_shape = if keepdims { vec![1; shape.len().max(1)] } else { vec![1] };
                let n = x.len();
                let parent = self.clone();
                Ok(Tensor::from_op(out_shape, vec![total], vec![self.clone()], move |dy| {
                    if parent.needs_grad() {
                        parent.accumulate_grad(&vec![dy[0]; n]);
                    }
                }))
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(shape_err("sum", format!("axis {ax} out of range for {shape:?}")));
                }
                let (outer, len, inner) = axis_blocks(&shape, ax);
                let mut out = vec![F::zero(); outer * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += x[(o * len + a) * inner + i];
                        }
                    }
                }
                let mut out_shape = shape.clone();
                if keepdims {
                    out_shape[ax] = 1;
                } else {
                    out_shape.remove(ax);
                    if out_shape.is_empty() {
                        out_shape.push(1);
                    }
                }
                let parent = self.clone();
                Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |dy| {
                    if !parent.needs_grad() {
                        return;
                    }
                    let mut dx = vec![F::zero(); outer * len * inner];
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                dx[(o * len + a) * inner + i] = dy[o * inner + i];
                            }
                        }
                    }
                    parent.accumulate_grad(&dx);
                }))
            }
        }
    }

    /// Arithmetic mean over one axis (or all elements).
    pub fn mean(&self, axis: Option<usize>, keepdims: bool) -> Result<Tensor<F>, TensorError> {
        let n = match axis {
            None => self.numel(),
            Some(ax) => {
                if ax >= self.shape().len() {
                    return Err(shape_err("mean", format!("axis {ax} out of range for {:?}", self.shape())));
                }
                self.shape()[ax]
            }
        };
        Ok(self.sum(axis, keepdims)?.scale(F::one() / F::from_f64(n as f64)))
    }

    /// Gather rows of an embedding table (`self`, `[vocab, dim]`) by id.
    /// Output shape is `ids_shape ++ [dim]`.
    pub fn embedding_lookup(&self, ids: &[usize], ids_shape: &[usize]) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(shape_err("embedding_lookup", format!("table must be rank 2, got {shape:?}")));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if numel(ids_shape) != ids.len() {
            return Err(shape_err(
                "embedding_lookup",
                format!("ids_shape {:?} implies {} ids, got {}", ids_shape, numel(ids_shape), ids.len()),
            ));
        }
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup".into(),
                    index: id,
                    size: vocab,
                });
            }
        }
        let table = self.values();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&table[id * dim..(id + 1) * dim]);
        }
        drop(table);
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(dim);
        let parent = self.clone();
        let ids_owned = ids.to_vec();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |dy| {
            if !parent.needs_grad() {
                return;
            }
            let mut dtable = vec![F::zero(); vocab * dim];
            for (row, &id) in ids_owned.iter().enumerate() {
                for j in 0..dim {
                    dtable[id * dim + j] += dy[row * dim + j];
                }
            }
            parent.accumulate_grad(&dtable);
        }))
    }

    /// Layer normalization over the last axis with affine rescale:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", "input must have rank >= 1"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma/beta must be [{d}], got {:?} and {:?}", gamma.shape(), beta.shape()),
            ));
        }
        let rows = numel(&shape) / d;
        let x = self.to_vec();
        let g_vals = gamma.to_vec();
        let b_vals = beta.to_vec();
        let epsf = F::from_f64(eps);
        let inv_d = F::one() / F::from_f64(d as f64);

        let mut out = vec![F::zero(); x.len()];
        let mut xhat = vec![F::zero(); x.len()];
        let mut invstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = F::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let is = F::one() / (var + epsf).sqrt();
            invstd[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g_vals[j] + b_vals[j];
            }
        }

        let (xt, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |dy| {
                if xt.needs_grad() {
                    let mut dx = vec![F::zero(); dy.len()];
                    for r in 0..rows {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let dxh = dy[r * d + j] * g_vals[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = dy[r * d + j] * g_vals[j];
                            dx[r * d + j] = invstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    xt.accumulate_grad(&dx);
                }
                if gt.needs_grad() {
                    let mut dg = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += dy[r * d + j] * xhat[r * d + j];
                        }
                    }
                    gt.accumulate_grad(&dg);
                }
                if bt.needs_grad() {
                    let mut db = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += dy[r * d + j];
                        }
                    }
                    bt.accumulate_grad(&db);
                }
            },
        ))
    }

    /// Concatenate along `axis`. All parts must agree on every other axis.
    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let base = parts[0].shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &v)| i != axis && v != base[i])
            {
                return Err(shape_err("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&out_shape, axis);

        let mut out = vec![F::zero(); numel(&out_shape)];
        let mut offset = 0;
        for (p, &len) in parts.iter().zip(&lens) {
            let vals = p.values();
            for o in 0..outer {
                let src = &vals[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * total + offset) * inner;
                out[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            offset += len;
        }

        let handles: Vec<Tensor<F>> = parts.to_vec();
        let lens_c = lens.clone();
        Ok(Tensor::from_op(out_shape, out, parts.to_vec(), move |dy| {
            let mut offset = 0;
            for (p, &len) in handles.iter().zip(&lens_c) {
                if p.needs_grad() {
                    let mut dp = vec![F::zero(); outer * len * inner];
                    for o in 0..outer {
                        let src_start = (o * total + offset) * inner;
                        dp[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&dy[src_start..src_start + len * inner]);
                    }
                    p.accumulate_grad(&dp);
                }
                offset += len;
            }
        }))
    }

    /// Contiguous range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err("slice", format!("axis {axis} out of range for {shape:?}")));
        }
        if start >= end || end > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{end} invalid for axis {axis} of size {}", shape[axis]),
            ));
        }
        let (outer, len, inner) = axis_blocks(&shape, axis);
        let width = end - start;
        let x = self.values();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let from = (o * len + start) * inner;
            out.extend_from_slice(&x[from..from + width * inner]);
        }
        drop(x);
        let mut out_shape = shape.clone();
        out_shape[axis] = width;
        let parent = self.clone();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |dy| {
            if !parent.needs_grad() {
                return;
            }
            let mut dx = vec![F::zero(); outer * len * inner];
            for o in 0..outer {
                let to = (o * len + start) * inner;
                dx[to..to + width * inner].copy_from_slice(&dy[o * width * inner..(o + 1) * width * inner]);
            }
            parent.accumulate_grad(&dx);
        }))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<F>, TensorError> {
        if numel(new_shape) != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} ({} values) cannot reshape to {new_shape:?}", self.shape(), self.numel()),
            ));
        }
        let parent = self.clone();
        Ok(Tensor::from_op(new_shape.to_vec(), self.to_vec(), vec![self.clone()], move |dy| {
            if parent.needs_grad() {
                parent.accumulate_grad(dy);
            }
        }))
    }

    /// Swap two axes.
    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor<F>, TensorError> {
        let shape = self.shape().to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(shape_err("transpose", format!("axes ({d0}, {d1}) out of range for {shape:?}")));
        }
        let (out, out_shape) = swap_axes(&self.values(), &shape, d0, d1);
        let parent = self.clone();
        let osh = out_shape.clone();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |dy| {
            if parent.needs_grad() {
                let (dx, _) = swap_axes(dy, &osh, d0, d1);
                parent.accumulate_grad(&dx);
            }
        }))
    }

    /// Inverted dropout: kept activations are scaled by 1/(1-p) so inference
    /// needs no rescale. `p = 0` is the identity (same tensor handle).
    pub fn dropout(&self, p: f64, rng: &mut RngStream) -> Result<Tensor<F>, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::NumericDomain(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.numel())
            .map(|_| if rng.bernoulli(p) { F::zero() } else { keep_scale })
            .collect();
        let x = self.values();
        let out: Vec<F> = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        drop(x);
        let parent = self.clone();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |dy| {
            if parent.needs_grad() {
                let dx: Vec<F> = dy.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                parent.accumulate_grad(&dx);
            }
        }))
    }
}
