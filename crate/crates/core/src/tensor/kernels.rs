//! Forward and backward kernels on raw row-major buffers.

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let offset = out.len() - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Visits every output position with the matching input offsets.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

enum Layout {
    Same,
    /// `b` repeats with period `b.numel()` (its shape is a suffix of `a`).
    Suffix,
    General(Vec<usize>, Vec<usize>),
}

fn layout(a: &[usize], b: &[usize], out: &[usize]) -> Layout {
    if a == b {
        return Layout::Same;
    }
    let trimmed: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    if a == out && out.ends_with(&trimmed) {
        return Layout::Suffix;
    }
    Layout::General(broadcast_strides(a, out), broadcast_strides(b, out))
}

pub(crate) fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(Real, Real) -> Real,
) -> Result<Tensor> {
    let out = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
    let (ad, bd) = (a.data(), b.data());
    let data = match layout(a.shape(), b.shape(), &out) {
        Layout::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Layout::Suffix => {
            let p = bd.len();
            ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % p])).collect()
        }
        Layout::General(sa, sb) => {
            let mut data = vec![0.0; out.iter().product()];
            for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
            data
        }
    };
    Ok(Tensor { shape: out, data })
}

/// Accumulates `df_a(o, ia, ib)` / `df_b(..)` contributions of the output
/// gradient back into the (possibly broadcast) operand shapes.
pub(crate) fn binary_broadcast_backward(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut ga: Option<&mut [Real]>,
    mut gb: Option<&mut [Real]>,
    mut contrib: impl FnMut(usize, usize, usize) -> (Real, Real),
) {
    let mut visit = |o: usize, ia: usize, ib: usize| {
        let (ca, cb) = contrib(o, ia, ib);
        if let Some(ga) = ga.as_deref_mut() {
            ga[ia] += ca;
        }
        if let Some(gb) = gb.as_deref_mut() {
            gb[ib] += cb;
        }
    };
    match layout(a_shape, b_shape, out_shape) {
        Layout::Same => (0..out_shape.iter().product()).for_each(|i| visit(i, i, i)),
        Layout::Suffix => {
            let p: usize = b_shape.iter().product();
            (0..out_shape.iter().product()).for_each(|i| visit(i, i, i % p))
        }
        Layout::General(sa, sb) => for_each_broadcast(out_shape, &sa, &sb, visit),
    }
}

/// Batch pairing for a broadcasting matmul: for each output matrix, the
/// indices of the `a` and `b` matrices that produce it.
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
    let mut pairs = Vec::with_capacity(batch.iter().product());
    if batch.is_empty() {
        pairs.push((0, 0));
    } else {
        let sa = broadcast_strides(ba, &batch);
        let sb = broadcast_strides(bb, &batch);
        for_each_broadcast(&batch, &sa, &sb, |_, ia, ib| pairs.push((ia, ib)));
    }
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        out_shape,
        pairs,
        m,
        k,
        n,
    })
}

pub(crate) fn matmul_forward(plan: &MatmulPlan, a: &[Real], b: &[Real]) -> Vec<Real> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; plan.pairs.len() * m * n];
    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
        let am = &a[ia * m * k..(ia + 1) * m * k];
        let bm = &b[ib * k * n..(ib + 1) * k * n];
        let om = &mut out[o * m * n..(o + 1) * m * n];
        for i in 0..m {
            let orow = &mut om[i * n..(i + 1) * n];
            for p in 0..k {
                let av = am[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bm[p * n..(p + 1) * n];
                for (ov, &bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    }
    out
}

/// dA += dC · Bᵀ and dB += Aᵀ · dC, summed over broadcast batch axes.
pub(crate) fn matmul_backward(
    plan: &MatmulPlan,
    a: &[Real],
    b: &[Real],
    grad: &[Real],
    mut ga: Option<&mut [Real]>,
    mut gb: Option<&mut [Real]>,
) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
        let gm = &grad[o * m * n..(o + 1) * m * n];
        if let Some(ga) = ga.as_deref_mut() {
            let bm = &b[ib * k * n..(ib + 1) * k * n];
            let gam = &mut ga[ia * m * k..(ia + 1) * m * k];
            for i in 0..m {
                let grow = &gm[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bm[p * n..(p + 1) * n];
                    gam[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<Real>();
                }
            }
        }
        if let Some(gb) = gb.as_deref_mut() {
            let am = &a[ia * m * k..(ia + 1) * m * k];
            let gbm = &mut gb[ib * k * n..(ib + 1) * k * n];
            for i in 0..m {
                let grow = &gm[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = am[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let gbrow = &mut gbm[p * n..(p + 1) * n];
                    for (gv, &g) in gbrow.iter_mut().zip(grow) {
                        *gv += av * g;
                    }
                }
            }
        }
    }
}

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[Real], shape: &[usize], axis: usize, log: bool) -> Vec<Real> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(Real::NEG_INFINITY, Real::max);
            let sum: Real = (0..len).map(|j| (x[at(j)] - max).exp()).sum();
            let log_sum = sum.ln();
            for j in 0..len {
                let shifted = x[at(j)] - max;
                out[at(j)] = if log {
                    shifted - log_sum
                } else {
                    shifted.exp() / sum
                };
            }
        }
    }
    out
}

/// Gradient of softmax (`log == false`) or log-softmax given its output `y`.
pub(crate) fn softmax_backward(
    y: &[Real],
    grad: &[Real],
    shape: &[usize],
    axis: usize,
    log: bool,
    gx: &mut [Real],
) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            if log {
                let gsum: Real = (0..len).map(|j| grad[at(j)]).sum();
                for j in 0..len {
                    gx[at(j)] += grad[at(j)] - y[at(j)].exp() * gsum;
                }
            } else {
                let dot: Real = (0..len).map(|j| grad[at(j)] * y[at(j)]).sum();
                for j in 0..len {
                    gx[at(j)] += y[at(j)] * (grad[at(j)] - dot);
                }
            }
        }
    }
}

/// Swaps two axes, producing a contiguous copy.
pub(crate) fn transpose(x: &[Real], shape: &[usize], a1: usize, a2: usize) -> (Vec<Real>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a1, a2);
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut strides = in_strides.clone();
    strides.swap(a1, a2);
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}
