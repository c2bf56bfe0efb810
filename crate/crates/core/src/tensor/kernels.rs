//! Raw row-major array math shared by forward ops and backward closures.
//!
//! Broadcasting follows trailing-dimension alignment: shapes are right
//! aligned, and a dimension of 1 stretches to match its partner.

use super::Scalar;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Broadcast two shapes with trailing alignment. Returns the output shape or
/// the offending axis (counted from the right) with both extents.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>, (usize, usize, usize)> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let db = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err((i, da, db));
        };
    }
    Ok(out)
}

/// Strides for reading `shape` as if broadcast to `out_shape` (0 at
/// stretched axes). `shape` must already broadcast to `out_shape`.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_for(shape);
    let mut out = vec![0; out_shape.len()];
    for i in 0..out_shape.len() {
        let ri = out_shape.len() - 1 - i;
        if i < shape.len() {
            let si = shape.len() - 1 - i;
            out[ri] = if shape[si] == 1 && out_shape[ri] != 1 { 0 } else { strides[si] };
        }
    }
    out
}

/// Elementwise binary op with broadcasting. Shapes must be compatible;
/// `out_shape` is their broadcast.
pub fn binary_broadcast<F: Scalar>(
    a: &[F],
    a_shape: &[usize],
    b: &[F],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(F, F) -> F,
) -> Vec<F> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 {
        return a.iter().map(|&x| f(x, b[0])).collect();
    }
    if a.len() == 1 {
        return b.iter().map(|&y| f(a[0], y)).collect();
    }
    let n = numel(out_shape);
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for _ in 0..n {
        out.push(f(a[oa], b[ob]));
        // Odometer increment with per-operand offset updates.
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (shaped `from`) down to shape `to` by reducing every axis that
/// was stretched by broadcasting. `to` must broadcast to `from`.
pub fn reduce_to_shape<F: Scalar>(grad: &[F], from: &[usize], to: &[usize]) -> Vec<F> {
    if from == to {
        return grad.to_vec();
    }
    let mut out = vec![F::zero(); numel(to)];
    if out.len() == 1 {
        for &g in grad {
            out[0] += g;
        }
        return out;
    }
    let st = broadcast_strides(to, from);
    let mut idx = vec![0usize; from.len()];
    let mut ot = 0usize;
    for &g in grad {
        out[ot] += g;
        for d in (0..from.len()).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            ot -= st[d] * from[d];
        }
    }
    out
}

/// Batched matrix multiply for shapes `[..., m, k] x [..., k, n]` with
/// broadcasting over the leading batch dimensions. Returns values and shape.
pub fn matmul<F: Scalar>(
    a: &[F],
    a_shape: &[usize],
    b: &[F],
    b_shape: &[usize],
) -> Result<(Vec<F>, Vec<usize>), String> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(format!("operands must be at least rank 2, got {a_shape:?} x {b_shape:?}"));
    }
    let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (k2, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    if k != k2 {
        return Err(format!("inner dimensions disagree: {a_shape:?} x {b_shape:?}"));
    }
    let batch_a = &a_shape[..a_shape.len() - 2];
    let batch_b = &b_shape[..b_shape.len() - 2];
    let batch = broadcast_shapes(batch_a, batch_b)
        .map_err(|_| format!("batch dimensions do not broadcast: {a_shape:?} x {b_shape:?}"))?;

    let mut out_shape = batch.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![F::zero(); numel(&out_shape)];

    let batches = numel(&batch);
    let sa = broadcast_strides(batch_a, &batch);
    let sb = broadcast_strides(batch_b, &batch);
    let mut idx = vec![0usize; batch.len()];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let (mat_a, mat_b, mat_o) = (m * k, k * n, m * n);
    for batch_i in 0..batches {
        let ao = base_a * mat_a;
        let bo = base_b * mat_b;
        let oo = batch_i * mat_o;
        for i in 0..m {
            for kk in 0..k {
                let av = a[ao + i * k + kk];
                if av == F::zero() {
                    continue;
                }
                let brow = bo + kk * n;
                let orow = oo + i * n;
                for j in 0..n {
                    out[orow + j] += av * b[brow + j];
                }
            }
        }
        for d in (0..batch.len()).rev() {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
            base_a -= sa[d] * batch[d];
            base_b -= sb[d] * batch[d];
        }
    }
    Ok((out, out_shape))
}

/// Swap two axes, materializing a contiguous copy.
pub fn swap_axes<F: Scalar>(vals: &[F], shape: &[usize], d0: usize, d1: usize) -> (Vec<F>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    if d0 == d1 {
        return (vals.to_vec(), out_shape);
    }
    let in_strides = strides_for(shape);
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(d0, d1);
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(vals[off]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += perm_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= perm_strides[d] * out_shape[d];
        }
    }
    (out, out_shape)
}

/// Decompose `shape` around `axis` as (outer, len, inner): the flat index of
/// element (o, a, i) is (o * len + a) * inner + i.
pub fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
