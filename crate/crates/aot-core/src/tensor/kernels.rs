//! Raw slice kernels shared by forward ops and their reverse functions.
//! All reductions run in fixed ascending index order.

use crate::scalar::Scalar;

/// c[m x n] = a[m x k] . b[k x n]
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (r, &av) in arow.iter().enumerate() {
            let brow = &b[r * n..(r + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// c[m x n] = a[m x k] . b[n x k]^T
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// c[k x n] = a[m x k]^T . b[m x n]
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (r, &av) in arow.iter().enumerate() {
            let orow = &mut out[r * n..(r + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Stabilized softmax over each contiguous run of `width` elements.
/// Entries of -inf are treated as masked (weight zero). Returns an error tag
/// (row index) if a run is entirely masked.
pub(crate) fn softmax_rows<T: Scalar>(
    x: &[T],
    width: usize,
) -> std::result::Result<Vec<T>, usize> {
    let rows = x.len() / width;
    let mut out = vec![T::ZERO; x.len()];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mut maxv = T::neg_infinity();
        for &v in row {
            maxv = maxv.maximum(v);
        }
        if maxv == T::neg_infinity() {
            return Err(r);
        }
        let orow = &mut out[r * width..(r + 1) * width];
        let mut sum = T::ZERO;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = if v == T::neg_infinity() {
                T::ZERO
            } else {
                (v - maxv).exp()
            };
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// dX for a softmax output p and upstream adjoint g, per row:
/// dx_j = p_j * (g_j - sum_k g_k p_k)
pub(crate) fn softmax_vjp<T: Scalar>(p: &[T], g: &[T], width: usize) -> Vec<T> {
    let rows = p.len() / width;
    let mut out = vec![T::ZERO; p.len()];
    for r in 0..rows {
        let prow = &p[r * width..(r + 1) * width];
        let grow = &g[r * width..(r + 1) * width];
        let mut dot = T::ZERO;
        for (&pv, &gv) in prow.iter().zip(grow.iter()) {
            dot += pv * gv;
        }
        let orow = &mut out[r * width..(r + 1) * width];
        for ((o, &pv), &gv) in orow.iter_mut().zip(prow.iter()).zip(grow.iter()) {
            *o = pv * (gv - dot);
        }
    }
    out
}
