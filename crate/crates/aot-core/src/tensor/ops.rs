//! Differentiable tensor operations.
//!
//! Every operation validates shapes, computes its result in the element
//! type's native precision with a fixed reduction order, checks the output
//! for numeric health, and appends a node to the active tape when any input
//! is tracked.
//!
//! NaN is an error state everywhere. -inf is accepted only where attention
//! masking needs it: as an input to [`softmax_lastdim`] and flowing through
//! [`add`] / [`sub`] / [`scale`].

use crate::error::{Error, Result};
use crate::scalar::{erf, norm_pdf, Scalar};
use crate::tensor::kernels;
use crate::tensor::tape;
use crate::tensor::Tensor;

fn check_strict<T: Scalar>(data: &[T], op: &str) -> Result<()> {
    for &v in data {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{op} produced non-finite value {v:?}")));
        }
    }
    Ok(())
}

fn check_no_nan<T: Scalar>(data: &[T], op: &str) -> Result<()> {
    for &v in data {
        if v.is_nan() || v == T::infinity() {
            return Err(Error::Numeric(format!("{op} produced invalid value {v:?}")));
        }
    }
    Ok(())
}

fn want_2d<T: Scalar>(t: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!(
            "{op}: expected rank-2 tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// c[i,j] = sum_r a[i,r] * b[r,j], accumulated in ascending r.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = want_2d(a, "matmul")?;
    let (kb, n) = want_2d(b, "matmul")?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul: inner extents differ, {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = kernels::matmul(a.data(), b.data(), m, ka, n);
    check_strict(&out, "matmul")?;
    let node = tape::record(&[a.node(), b.node()], &[m, n], |pids| {
        let a_saved = a.data().to_vec();
        let b_saved = b.data().to_vec();
        tape::bw::<T>(move |adj, emit| {
            if let Some(pa) = pids[0] {
                let da = kernels::matmul_nt(adj.data(), &b_saved, m, n, ka);
                emit(pa, Tensor::with_node(vec![m, ka], da, None));
            }
            if let Some(pb) = pids[1] {
                let db = kernels::matmul_tn(&a_saved, adj.data(), m, ka, n);
                emit(pb, Tensor::with_node(vec![ka, n], db, None));
            }
        })
    });
    Ok(Tensor::with_node(vec![m, n], out, node))
}

/// c[i,j] = sum_r a[i,r] * b[j,r]  (a . b^T without materializing b^T).
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = want_2d(a, "matmul_nt")?;
    let (n, kb) = want_2d(b, "matmul_nt")?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul_nt: inner extents differ, {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = kernels::matmul_nt(a.data(), b.data(), m, ka, n);
    check_strict(&out, "matmul_nt")?;
    let node = tape::record(&[a.node(), b.node()], &[m, n], |pids| {
        let a_saved = a.data().to_vec();
        let b_saved = b.data().to_vec();
        tape::bw::<T>(move |adj, emit| {
            if let Some(pa) = pids[0] {
                let da = kernels::matmul(adj.data(), &b_saved, m, n, ka);
                emit(pa, Tensor::with_node(vec![m, ka], da, None));
            }
            if let Some(pb) = pids[1] {
                let db = kernels::matmul_tn(adj.data(), &a_saved, m, n, ka);
                emit(pb, Tensor::with_node(vec![n, ka], db, None));
            }
        })
    });
    Ok(Tensor::with_node(vec![m, n], out, node))
}

fn zip_same_shape<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Vec<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out = zip_same_shape(a, b, "add", |x, y| x + y)?;
    check_no_nan(&out, "add")?;
    let shape = a.shape().to_vec();
    let node = tape::record(&[a.node(), b.node()], &shape, |pids| {
        let shape = shape.clone();
        tape::bw::<T>(move |adj, emit| {
            if let Some(pa) = pids[0] {
                emit(pa, Tensor::with_node(shape.clone(), adj.data().to_vec(), None));
            }
            if let Some(pb) = pids[1] {
                emit(pb, Tensor::with_node(shape.clone(), adj.data().to_vec(), None));
            }
        })
    });
    Ok(Tensor::with_node(a.shape().to_vec(), out, node))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out = zip_same_shape(a, b, "sub", |x, y| x - y)?;
    check_no_nan(&out, "sub")?;
    let shape = a.shape().to_vec();
    let node = tape::record(&[a.node(), b.node()], &shape, |pids| {
        let shape = shape.clone();
        tape::bw::<T>(move |adj, emit| {
            if let Some(pa) = pids[0] {
                emit(pa, Tensor::with_node(shape.clone(), adj.data().to_vec(), None));
            }
            if let Some(pb) = pids[1] {
                let neg: Vec<T> = adj.data().iter().map(|&g| -g).collect();
                emit(pb, Tensor::with_node(shape.clone(), neg, None));
            }
        })
    });
    Ok(Tensor::with_node(a.shape().to_vec(), out, node))
}

/// Elementwise product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out = zip_same_shape(a, b, "mul", |x, y| x * y)?;
    check_strict(&out, "mul")?;
    let shape = a.shape().to_vec();
    let node = tape::record(&[a.node(), b.node()], &shape, |pids| {
        let a_saved = a.data().to_vec();
        let b_saved = b.data().to_vec();
        let shape = shape.clone();
        tape::bw::<T>(move |adj, emit| {
            if let Some(pa) = pids[0] {
                let da: Vec<T> = adj.data().iter().zip(&b_saved).map(|(&g, &y)| g * y).collect();
                emit(pa, Tensor::with_node(shape.clone(), da, None));
            }
            if let Some(pb) = pids[1] {
                let db: Vec<T> = adj.data().iter().zip(&a_saved).map(|(&g, &x)| g * x).collect();
                emit(pb, Tensor::with_node(shape.clone(), db, None));
            }
        })
    });
    Ok(Tensor::with_node(a.shape().to_vec(), out, node))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    let out: Vec<T> = a.data().iter().map(|&x| x * s).collect();
    check_no_nan(&out, "scale")?;
    let shape = a.shape().to_vec();
    let node = tape::record(&[a.node()], &shape, |pids| {
        let shape = shape.clone();
        tape::bw::<T>(move |adj, emit| {
            if let Some(pa) = pids[0] {
                let da: Vec<T> = adj.data().iter().map(|&g| g * s).collect();
                emit(pa, Tensor::with_node(shape.clone(), da, None));
            }
        })
    });
    Ok(Tensor::with_node(a.shape().to_vec(), out, node))
}

/// x[r x c] + row vector b[c] broadcast over rows.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.cols();
    if b.rank() != 1 || b.shape()[0] != c {
        return Err(Error::Shape(format!(
            "add_bias: bias shape {:?} does not match row width {c}",
            b.shape()
        )));
    }
    let rows = x.rows();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        for (o, &bv) in out[r * c..(r + 1) * c].iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    check_strict(&out, "add_bias")?;
    let shape = x.shape().to_vec();
    let node = tape::record(&[x.node(), b.node()], &shape, |pids| {
        let shape = shape.clone();
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                emit(px, Tensor::with_node(shape.clone(), adj.data().to_vec(), None));
            }
            if let Some(pb) = pids[1] {
                let mut db = vec![T::ZERO; c];
                for r in 0..rows {
                    for (d, &g) in db.iter_mut().zip(&adj.data()[r * c..(r + 1) * c]) {
                        *d += g;
                    }
                }
                emit(pb, Tensor::with_node(vec![c], db, None));
            }
        })
    });
    Ok(Tensor::with_node(x.shape().to_vec(), out, node))
}

/// Sum of all elements, as a rank-0 tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut acc = T::ZERO;
    for &v in x.data() {
        acc += v;
    }
    if !acc.is_finite() {
        return Err(Error::Numeric("sum_all produced non-finite value".into()));
    }
    let shape = x.shape().to_vec();
    let node = tape::record(&[x.node()], &[], |pids| {
        let shape = shape.clone();
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                let g = adj.data()[0];
                emit(
                    px,
                    Tensor::with_node(shape.clone(), vec![g; shape.iter().product()], None),
                );
            }
        })
    });
    Ok(Tensor::with_node(Vec::new(), vec![acc], node))
}

/// Stabilized softmax over the last dimension. Input entries of -inf are
/// treated as masked; a fully masked slice is a numeric error.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.cols();
    if x.rank() == 0 || d == 0 {
        return Err(Error::Shape(
            "softmax_lastdim: empty last dimension".into(),
        ));
    }
    for &v in x.data() {
        if v.is_nan() || v == T::infinity() {
            return Err(Error::Numeric(format!(
                "softmax_lastdim received invalid logit {v:?}"
            )));
        }
    }
    let out = kernels::softmax_rows(x.data(), d).map_err(|row| {
        Error::Numeric(format!(
            "softmax_lastdim: slice {row} is entirely masked (-inf)"
        ))
    })?;
    check_strict(&out, "softmax_lastdim")?;
    let shape = x.shape().to_vec();
    let node = tape::record(&[x.node()], &shape, |pids| {
        let p_saved = out.clone();
        let shape = shape.clone();
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                let dx = kernels::softmax_vjp(&p_saved, adj.data(), d);
                emit(px, Tensor::with_node(shape.clone(), dx, None));
            }
        })
    });
    Ok(Tensor::with_node(x.shape().to_vec(), out, node))
}

/// Per-slice normalization over the last dimension followed by an affine map.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = x.cols();
    if x.rank() == 0 || c == 0 {
        return Err(Error::Shape("layer_norm: empty last dimension".into()));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::Shape(format!(
            "layer_norm: gain {:?} / bias {:?} do not match width {c}",
            gain.shape(),
            bias.shape()
        )));
    }
    if !(eps > T::ZERO) {
        return Err(Error::Config("layer_norm: eps must be positive".into()));
    }
    let rows = x.rows();
    let inv_c = T::ONE / T::from_f64(c as f64);
    let mut xhat = vec![T::ZERO; x.numel()];
    let mut inv_std = vec![T::ZERO; rows];
    let mut out = vec![T::ZERO; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_c;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_c;
        let inv = T::ONE / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..c {
            let h = (row[j] - mean) * inv;
            xhat[r * c + j] = h;
            out[r * c + j] = gain.data()[j] * h + bias.data()[j];
        }
    }
    check_strict(&out, "layer_norm")?;
    let shape = x.shape().to_vec();
    let node = tape::record(&[x.node(), gain.node(), bias.node()], &shape, |pids| {
        let gain_saved = gain.data().to_vec();
        let shape = shape.clone();
        tape::bw::<T>(move |adj, emit| {
            let g = adj.data();
            if let Some(px) = pids[0] {
                let mut dx = vec![T::ZERO; xhat.len()];
                for r in 0..rows {
                    let mut mean_dh = T::ZERO;
                    let mut mean_dh_xhat = T::ZERO;
                    for j in 0..c {
                        let dh = g[r * c + j] * gain_saved[j];
                        mean_dh += dh;
                        mean_dh_xhat += dh * xhat[r * c + j];
                    }
                    mean_dh *= inv_c;
                    mean_dh_xhat *= inv_c;
                    for j in 0..c {
                        let dh = g[r * c + j] * gain_saved[j];
                        dx[r * c + j] =
                            inv_std[r] * (dh - mean_dh - xhat[r * c + j] * mean_dh_xhat);
                    }
                }
                emit(px, Tensor::with_node(shape.clone(), dx, None));
            }
            if let Some(pg) = pids[1] {
                let mut dg = vec![T::ZERO; c];
                for r in 0..rows {
                    for j in 0..c {
                        dg[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
                emit(pg, Tensor::with_node(vec![c], dg, None));
            }
            if let Some(pb) = pids[2] {
                let mut db = vec![T::ZERO; c];
                for r in 0..rows {
                    for j in 0..c {
                        db[j] += g[r * c + j];
                    }
                }
                emit(pb, Tensor::with_node(vec![c], db, None));
            }
        })
    });
    Ok(Tensor::with_node(x.shape().to_vec(), out, node))
}

/// Exact Gaussian-CDF GELU: x * Phi(x), with the error function evaluated in
/// double precision regardless of element type.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let out: Vec<T> = x
        .data()
        .iter()
        .map(|&v| {
            let xf = v.to_f64();
            T::from_f64(xf * 0.5 * (1.0 + erf(xf / std::f64::consts::SQRT_2)))
        })
        .collect();
    check_strict(&out, "gelu")?;
    let shape = x.shape().to_vec();
    let node = tape::record(&[x.node()], &shape, |pids| {
        let x_saved = x.data().to_vec();
        let shape = shape.clone();
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                let dx: Vec<T> = adj
                    .data()
                    .iter()
                    .zip(&x_saved)
                    .map(|(&g, &v)| {
                        let xf = v.to_f64();
                        let cdf = 0.5 * (1.0 + erf(xf / std::f64::consts::SQRT_2));
                        g * T::from_f64(cdf + xf * norm_pdf(xf))
                    })
                    .collect();
                emit(px, Tensor::with_node(shape.clone(), dx, None));
            }
        })
    });
    Ok(Tensor::with_node(x.shape().to_vec(), out, node))
}

/// out[i, :] = x[indices[i], :]
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let (r, c) = want_2d(x, "gather_rows")?;
    for &i in indices {
        if i >= r {
            return Err(Error::Shape(format!(
                "gather_rows: index {i} out of range for {r} rows"
            )));
        }
    }
    let mut out = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
    }
    let out_shape = vec![indices.len(), c];
    let node = tape::record(&[x.node()], &out_shape, |pids| {
        let idx = indices.to_vec();
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                let mut dx = vec![T::ZERO; r * c];
                for (pos, &i) in idx.iter().enumerate() {
                    for (d, &g) in dx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&adj.data()[pos * c..(pos + 1) * c])
                    {
                        *d += g;
                    }
                }
                emit(px, Tensor::with_node(vec![r, c], dx, None));
            }
        })
    });
    Ok(Tensor::with_node(out_shape, out, node))
}

/// Sum each consecutive group of `group` rows: [g*k x c] -> [g x c].
pub fn segment_sum_rows<T: Scalar>(x: &Tensor<T>, group: usize) -> Result<Tensor<T>> {
    let (r, c) = want_2d(x, "segment_sum_rows")?;
    if group == 0 || r % group != 0 {
        return Err(Error::Shape(format!(
            "segment_sum_rows: {r} rows not divisible into groups of {group}"
        )));
    }
    let g = r / group;
    let mut out = vec![T::ZERO; g * c];
    for i in 0..r {
        let dst = &mut out[(i / group) * c..(i / group + 1) * c];
        for (o, &v) in dst.iter_mut().zip(&x.data()[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    check_strict(&out, "segment_sum_rows")?;
    let out_shape = vec![g, c];
    let node = tape::record(&[x.node()], &out_shape, |pids| {
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                let mut dx = vec![T::ZERO; r * c];
                for i in 0..r {
                    dx[i * c..(i + 1) * c]
                        .copy_from_slice(&adj.data()[(i / group) * c..(i / group + 1) * c]);
                }
                emit(px, Tensor::with_node(vec![r, c], dx, None));
            }
        })
    });
    Ok(Tensor::with_node(out_shape, out, node))
}

/// Stack rank-2 tensors with equal widths on top of each other.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Shape("concat_rows: empty input list".into()));
    }
    let c = want_2d(parts[0], "concat_rows")?.1;
    let mut rows = 0;
    for p in parts {
        let (r, pc) = want_2d(p, "concat_rows")?;
        if pc != c {
            return Err(Error::Shape(format!(
                "concat_rows: width mismatch {pc} vs {c}"
            )));
        }
        rows += r;
    }
    let mut out = Vec::with_capacity(rows * c);
    for p in parts {
        out.extend_from_slice(p.data());
    }
    let out_shape = vec![rows, c];
    let nodes: Vec<_> = parts.iter().map(|p| p.node()).collect();
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
    let node = tape::record(&nodes, &out_shape, |pids| {
        tape::bw::<T>(move |adj, emit| {
            let mut offset = 0;
            for (slot, &r) in pids.iter().zip(&sizes) {
                if let Some(p) = slot {
                    let chunk = adj.data()[offset * c..(offset + r) * c].to_vec();
                    emit(*p, Tensor::with_node(vec![r, c], chunk, None));
                }
                offset += r;
            }
        })
    });
    Ok(Tensor::with_node(out_shape, out, node))
}

/// Columns [start, end) of a rank-2 tensor.
pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let (r, c) = want_2d(x, "slice_cols")?;
    if start >= end || end > c {
        return Err(Error::Shape(format!(
            "slice_cols: invalid range {start}..{end} for width {c}"
        )));
    }
    let w = end - start;
    let mut out = Vec::with_capacity(r * w);
    for i in 0..r {
        out.extend_from_slice(&x.data()[i * c + start..i * c + end]);
    }
    let out_shape = vec![r, w];
    let node = tape::record(&[x.node()], &out_shape, |pids| {
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                let mut dx = vec![T::ZERO; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + end]
                        .copy_from_slice(&adj.data()[i * w..(i + 1) * w]);
                }
                emit(px, Tensor::with_node(vec![r, c], dx, None));
            }
        })
    });
    Ok(Tensor::with_node(out_shape, out, node))
}

/// Concatenate rank-2 tensors with equal row counts side by side.
pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Shape("concat_cols: empty input list".into()));
    }
    let r = want_2d(parts[0], "concat_cols")?.0;
    let mut total = 0;
    for p in parts {
        let (pr, pc) = want_2d(p, "concat_cols")?;
        if pr != r {
            return Err(Error::Shape(format!(
                "concat_cols: row mismatch {pr} vs {r}"
            )));
        }
        total += pc;
    }
    let mut out = vec![T::ZERO; r * total];
    let mut offset = 0;
    for p in parts {
        let pc = p.shape()[1];
        for i in 0..r {
            out[i * total + offset..i * total + offset + pc]
                .copy_from_slice(&p.data()[i * pc..(i + 1) * pc]);
        }
        offset += pc;
    }
    let out_shape = vec![r, total];
    let nodes: Vec<_> = parts.iter().map(|p| p.node()).collect();
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let node = tape::record(&nodes, &out_shape, |pids| {
        tape::bw::<T>(move |adj, emit| {
            let mut offset = 0;
            for (slot, &pc) in pids.iter().zip(&widths) {
                if let Some(p) = slot {
                    let mut dpart = vec![T::ZERO; r * pc];
                    for i in 0..r {
                        dpart[i * pc..(i + 1) * pc].copy_from_slice(
                            &adj.data()[i * total + offset..i * total + offset + pc],
                        );
                    }
                    emit(*p, Tensor::with_node(vec![r, pc], dpart, None));
                }
                offset += pc;
            }
        })
    });
    Ok(Tensor::with_node(out_shape, out, node))
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = want_2d(x, "transpose")?;
    let out = kernels::transpose(x.data(), r, c);
    let out_shape = vec![c, r];
    let node = tape::record(&[x.node()], &out_shape, |pids| {
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                let dx = kernels::transpose(adj.data(), c, r);
                emit(px, Tensor::with_node(vec![r, c], dx, None));
            }
        })
    });
    Ok(Tensor::with_node(out_shape, out, node))
}

/// Same data, new shape with equal element count.
pub fn reshape<T: Scalar>(x: &Tensor<T>, new_shape: &[usize]) -> Result<Tensor<T>> {
    if new_shape.iter().product::<usize>() != x.numel() {
        return Err(Error::Shape(format!(
            "reshape: {:?} incompatible with {:?}",
            x.shape(),
            new_shape
        )));
    }
    let old_shape = x.shape().to_vec();
    let node = tape::record(&[x.node()], new_shape, |pids| {
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                emit(
                    px,
                    Tensor::with_node(old_shape.clone(), adj.data().to_vec(), None),
                );
            }
        })
    });
    Ok(Tensor::with_node(new_shape.to_vec(), x.data().to_vec(), node))
}

/// Index of the largest entry in each last-dimension slice; first maximum
/// wins on ties. Not differentiable.
pub fn argmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Vec<usize> {
    let d = x.cols();
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}
