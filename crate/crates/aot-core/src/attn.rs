//! Attention kernels.
//!
//! [`scaled_dot_attention`] is the non-local primitive; [`multi_head`] wraps
//! it with channel-sliced heads, concatenation and an output projection.
//! [`long_term_attention`] matches the current frame against arbitrarily old
//! memory with queries and keys sharing one projection, while
//! [`short_term_attention`] restricts each location to a lambda x lambda
//! window in the most recent frames. [`windowed_attention_oracle`] is the
//! quadratic reference the windowed kernel is verified against.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::tape;
use crate::tensor::{ops, Tensor};

/// Head count and model width; every attention module here uses square
/// projections, so per-head key and value widths coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionHeadsConfig {
    pub heads: usize,
    pub channels: usize,
}

impl AttentionHeadsConfig {
    pub fn new(heads: usize, channels: usize) -> Result<AttentionHeadsConfig> {
        if heads == 0 || channels == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "attention config: {heads} heads must divide {channels} channels"
            )));
        }
        Ok(AttentionHeadsConfig { heads, channels })
    }

    pub fn head_width(&self) -> usize {
        self.channels / self.heads
    }
}

/// Fixed 2-D sine/cosine positional table, [h*w, c]. Half the channels encode
/// the row coordinate, half the column coordinate.
#[derive(Clone, Debug)]
pub struct SinePos2D<T: Scalar> {
    pub table: Tensor<T>,
    pub h: usize,
    pub w: usize,
}

/// Deterministic sine table for a grid. `c` must be divisible by 4 so each
/// spatial axis gets whole sin/cos pairs.
pub fn sine_pos_embed<T: Scalar>(h: usize, w: usize, c: usize) -> Result<SinePos2D<T>> {
    if c % 4 != 0 {
        return Err(Error::Config(format!(
            "sine_pos_embed: channel count {c} must be divisible by 4"
        )));
    }
    let half = c / 2;
    let pairs = half / 2;
    let mut data = vec![T::ZERO; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            for i in 0..pairs {
                let omega = 10000f64.powf(-((2 * i) as f64) / half as f64);
                let ry = y as f64 * omega;
                let rx = x as f64 * omega;
                data[base + 2 * i] = T::from_f64(ry.sin());
                data[base + 2 * i + 1] = T::from_f64(ry.cos());
                data[base + half + 2 * i] = T::from_f64(rx.sin());
                data[base + half + 2 * i + 1] = T::from_f64(rx.cos());
            }
        }
    }
    Ok(SinePos2D {
        table: Tensor::with_node(vec![h * w, c], data, None),
        h,
        w,
    })
}

/// Learned per-offset logit bias for windowed attention: one lambda x lambda
/// table per head, shared across the short-term frames. Zero initialized.
#[derive(Clone, Debug)]
pub struct RelPosBias<T: Scalar> {
    pub table: Tensor<T>,
}

impl<T: Scalar> RelPosBias<T> {
    pub fn zeros(heads: usize, lambda: usize) -> Result<RelPosBias<T>> {
        if lambda % 2 == 0 {
            return Err(Error::Config(format!(
                "relative position bias: window size {lambda} must be odd"
            )));
        }
        Ok(RelPosBias {
            table: Tensor::zeros(&[heads, lambda, lambda]),
        })
    }

    pub fn from_table(table: Tensor<T>) -> Result<RelPosBias<T>> {
        if table.rank() != 3 || table.shape()[1] != table.shape()[2] {
            return Err(Error::Config(format!(
                "relative position bias: expected [heads, lambda, lambda], got {:?}",
                table.shape()
            )));
        }
        if table.shape()[1] % 2 == 0 {
            return Err(Error::Config(
                "relative position bias: window size must be odd".into(),
            ));
        }
        Ok(RelPosBias { table })
    }

    pub fn heads(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn lambda(&self) -> usize {
        self.table.shape()[1]
    }
}

fn check_bias_rows<T: Scalar>(bias: &Tensor<T>) -> Result<()> {
    for r in 0..bias.rows() {
        if bias.row(r).iter().all(|&v| v == T::neg_infinity()) {
            return Err(Error::Degenerate(format!(
                "attention row {r} has every key masked"
            )));
        }
    }
    Ok(())
}

/// softmax(q k^T / sqrt(width) + bias) v, computed from the recorded
/// primitives so it differentiates end to end. `bias` may contain -inf for
/// masked entries; a fully masked row is an error.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    Ok(scaled_dot_attention_with_weights(q, k, v, bias)?.0)
}

/// As [`scaled_dot_attention`], also returning the attention weight matrix.
pub fn scaled_dot_attention_with_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::Shape("attention inputs must be rank 2".into()));
    }
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "attention: query width {} vs key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention: {} keys vs {} values",
            k.rows(),
            v.rows()
        )));
    }
    let logits = ops::matmul_nt(q, k)?;
    let inv_sqrt = T::from_f64(1.0 / (q.cols() as f64).sqrt());
    let mut scaled = ops::scale(&logits, inv_sqrt)?;
    if let Some(b) = bias {
        if b.shape() != [q.rows(), k.rows()] {
            return Err(Error::Shape(format!(
                "attention bias shape {:?}, expected [{}, {}]",
                b.shape(),
                q.rows(),
                k.rows()
            )));
        }
        check_bias_rows(b)?;
        scaled = ops::add(&scaled, b)?;
    }
    let weights = ops::softmax_lastdim(&scaled)?;
    let out = ops::matmul(&weights, v)?;
    Ok((out, weights))
}

/// Channel-sliced heads over already projected full-width q/k/v, concatenated
/// and sent through the output projection `w_o`.
pub fn multi_head<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    w_o: &Tensor<T>,
    cfg: AttentionHeadsConfig,
    bias_per_head: Option<&[Tensor<T>]>,
) -> Result<Tensor<T>> {
    Ok(multi_head_with_weights(q, k, v, w_o, cfg, bias_per_head)?.0)
}

/// As [`multi_head`], also returning each head's attention weights.
pub fn multi_head_with_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    w_o: &Tensor<T>,
    cfg: AttentionHeadsConfig,
    bias_per_head: Option<&[Tensor<T>]>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let c = cfg.channels;
    if q.cols() != c || k.cols() != c || v.cols() != c {
        return Err(Error::Shape(format!(
            "multi_head: inputs must be width {c}, got {}/{}/{}",
            q.cols(),
            k.cols(),
            v.cols()
        )));
    }
    if w_o.shape() != [c, c] {
        return Err(Error::Shape(format!(
            "multi_head: output projection {:?}, expected [{c}, {c}]",
            w_o.shape()
        )));
    }
    if let Some(biases) = bias_per_head {
        if biases.len() != cfg.heads {
            return Err(Error::Config(format!(
                "multi_head: {} bias matrices for {} heads",
                biases.len(),
                cfg.heads
            )));
        }
    }
    let ck = cfg.head_width();
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let qs = ops::slice_cols(q, hd * ck, (hd + 1) * ck)?;
        let ks = ops::slice_cols(k, hd * ck, (hd + 1) * ck)?;
        let vs = ops::slice_cols(v, hd * ck, (hd + 1) * ck)?;
        let bias = bias_per_head.map(|b| &b[hd]);
        let (o, w) = scaled_dot_attention_with_weights(&qs, &ks, &vs, bias)?;
        outs.push(o);
        weights.push(w);
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    let concat = ops::concat_cols(&refs)?;
    Ok((ops::matmul(&concat, w_o)?, weights))
}

/// Non-local attention over concatenated memory frames. Queries and keys
/// share `wk` so matching happens inside one embedding space; memory values
/// carry the identification embedding `em`.
pub fn long_term_attention<T: Scalar>(
    xt: &Tensor<T>,
    xm: &Tensor<T>,
    em: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    w_o: &Tensor<T>,
    cfg: AttentionHeadsConfig,
) -> Result<Tensor<T>> {
    if xm.shape() != em.shape() {
        return Err(Error::Shape(format!(
            "long_term_attention: memory {:?} vs embedding {:?}",
            xm.shape(),
            em.shape()
        )));
    }
    let q = ops::matmul(xt, wk)?;
    let k = ops::matmul(xm, wk)?;
    let v = ops::add(&ops::matmul(xm, wv)?, em)?;
    multi_head(&q, &k, &v, w_o, cfg, None)
}

/// The projected-inputs core of short-term attention: for every location, a
/// single query attends over the lambda x lambda windows centered at it in
/// each of the n frames, with the learned relative bias added per offset and
/// out-of-image cells masked away.
///
/// `q` is [h*w, c]; `k`/`v` are [n*h*w, c] (frame-major); `rel` is the bias
/// table. Output is the per-head concatenation, [h*w, c], before any output
/// projection. One fused tape node with a hand-written reverse function.
#[allow(clippy::too_many_arguments)]
pub fn window_attention_core<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    rel: &Tensor<T>,
    h: usize,
    w: usize,
    n_frames: usize,
    lambda: usize,
    heads: usize,
) -> Result<Tensor<T>> {
    let cfg = AttentionHeadsConfig::new(heads, q.cols())?;
    let c = cfg.channels;
    if lambda % 2 == 0 || lambda == 0 {
        return Err(Error::Config(format!(
            "short-term attention: window size {lambda} must be odd"
        )));
    }
    if n_frames == 0 {
        return Err(Error::Config("short-term attention: zero frames".into()));
    }
    if q.shape() != [h * w, c] {
        return Err(Error::Shape(format!(
            "short-term attention: query {:?}, expected [{}, {c}]",
            q.shape(),
            h * w
        )));
    }
    if k.shape() != [n_frames * h * w, c] || v.shape() != [n_frames * h * w, c] {
        return Err(Error::Shape(format!(
            "short-term attention: keys {:?} / values {:?}, expected [{}, {c}]",
            k.shape(),
            v.shape(),
            n_frames * h * w
        )));
    }
    if rel.shape() != [heads, lambda, lambda] {
        return Err(Error::Shape(format!(
            "short-term attention: bias table {:?}, expected [{heads}, {lambda}, {lambda}]",
            rel.shape()
        )));
    }

    let out = window_forward(
        q.data(),
        k.data(),
        v.data(),
        rel.data(),
        h,
        w,
        n_frames,
        lambda,
        heads,
        c,
    );
    for &val in &out {
        if !val.is_finite() {
            return Err(Error::Numeric(
                "short-term attention produced non-finite value".into(),
            ));
        }
    }

    let out_shape = vec![h * w, c];
    let node = tape::record(
        &[q.node(), k.node(), v.node(), rel.node()],
        &out_shape,
        |pids| {
            let q_saved = q.data().to_vec();
            let k_saved = k.data().to_vec();
            let v_saved = v.data().to_vec();
            let rel_saved = rel.data().to_vec();
            tape::bw::<T>(move |adj, emit| {
                let (dq, dk, dv, drel) = window_backward(
                    &q_saved,
                    &k_saved,
                    &v_saved,
                    &rel_saved,
                    adj.data(),
                    h,
                    w,
                    n_frames,
                    lambda,
                    heads,
                    c,
                );
                if let Some(p) = pids[0] {
                    emit(p, Tensor::with_node(vec![h * w, c], dq, None));
                }
                if let Some(p) = pids[1] {
                    emit(p, Tensor::with_node(vec![n_frames * h * w, c], dk, None));
                }
                if let Some(p) = pids[2] {
                    emit(p, Tensor::with_node(vec![n_frames * h * w, c], dv, None));
                }
                if let Some(p) = pids[3] {
                    emit(p, Tensor::with_node(vec![heads, lambda, lambda], drel, None));
                }
            })
        },
    );
    Ok(Tensor::with_node(out_shape, out, node))
}

/// Valid window cells for a query location: (key row, bias table offset).
fn window_cells(
    py: usize,
    px: usize,
    h: usize,
    w: usize,
    n_frames: usize,
    lambda: usize,
) -> Vec<(usize, usize)> {
    let r = (lambda as isize - 1) / 2;
    let mut cells = Vec::with_capacity(n_frames * lambda * lambda);
    for f in 0..n_frames {
        for dy in -r..=r {
            let ky = py as isize + dy;
            if ky < 0 || ky >= h as isize {
                continue;
            }
            for dx in -r..=r {
                let kx = px as isize + dx;
                if kx < 0 || kx >= w as isize {
                    continue;
                }
                let row = f * h * w + ky as usize * w + kx as usize;
                let off = (dy + r) as usize * lambda + (dx + r) as usize;
                cells.push((row, off));
            }
        }
    }
    cells
}

#[allow(clippy::too_many_arguments)]
fn window_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    rel: &[T],
    h: usize,
    w: usize,
    n_frames: usize,
    lambda: usize,
    heads: usize,
    c: usize,
) -> Vec<T> {
    let ck = c / heads;
    let scale = T::from_f64(1.0 / (ck as f64).sqrt());
    let mut out = vec![T::ZERO; h * w * c];
    let mut logits: Vec<T> = Vec::new();
    for py in 0..h {
        for px in 0..w {
            let p = py * w + px;
            let cells = window_cells(py, px, h, w, n_frames, lambda);
            for hd in 0..heads {
                let qs = &q[p * c + hd * ck..p * c + (hd + 1) * ck];
                logits.clear();
                let mut maxv = T::neg_infinity();
                for &(row, off) in &cells {
                    let ks = &k[row * c + hd * ck..row * c + (hd + 1) * ck];
                    let mut dot = T::ZERO;
                    for (&a, &b) in qs.iter().zip(ks) {
                        dot += a * b;
                    }
                    let z = dot * scale + rel[hd * lambda * lambda + off];
                    maxv = maxv.maximum(z);
                    logits.push(z);
                }
                let mut denom = T::ZERO;
                for z in logits.iter_mut() {
                    *z = (*z - maxv).exp();
                    denom += *z;
                }
                let orow = &mut out[p * c + hd * ck..p * c + (hd + 1) * ck];
                for (&(row, _), &e) in cells.iter().zip(logits.iter()) {
                    let weight = e / denom;
                    let vs = &v[row * c + hd * ck..row * c + (hd + 1) * ck];
                    for (o, &vv) in orow.iter_mut().zip(vs) {
                        *o += weight * vv;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn window_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    rel: &[T],
    adj: &[T],
    h: usize,
    w: usize,
    n_frames: usize,
    lambda: usize,
    heads: usize,
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let ck = c / heads;
    let scale = T::from_f64(1.0 / (ck as f64).sqrt());
    let mut dq = vec![T::ZERO; q.len()];
    let mut dk = vec![T::ZERO; k.len()];
    let mut dv = vec![T::ZERO; v.len()];
    let mut drel = vec![T::ZERO; rel.len()];
    let mut weights: Vec<T> = Vec::new();
    for py in 0..h {
        for px in 0..w {
            let p = py * w + px;
            let cells = window_cells(py, px, h, w, n_frames, lambda);
            for hd in 0..heads {
                let qs = &q[p * c + hd * ck..p * c + (hd + 1) * ck];
                let g = &adj[p * c + hd * ck..p * c + (hd + 1) * ck];
                // Recompute the softmax weights for this (location, head).
                weights.clear();
                let mut maxv = T::neg_infinity();
                for &(row, off) in &cells {
                    let ks = &k[row * c + hd * ck..row * c + (hd + 1) * ck];
                    let mut dot = T::ZERO;
                    for (&a, &b) in qs.iter().zip(ks) {
                        dot += a * b;
                    }
                    let z = dot * scale + rel[hd * lambda * lambda + off];
                    maxv = maxv.maximum(z);
                    weights.push(z);
                }
                let mut denom = T::ZERO;
                for z in weights.iter_mut() {
                    *z = (*z - maxv).exp();
                    denom += *z;
                }
                for z in weights.iter_mut() {
                    *z = *z / denom;
                }
                // e_i = g . v_i ; softmax VJP gives dlogit_i = w_i (e_i - s).
                let mut s = T::ZERO;
                let mut evals = Vec::with_capacity(cells.len());
                for (&(row, _), &wt) in cells.iter().zip(weights.iter()) {
                    let vs = &v[row * c + hd * ck..row * c + (hd + 1) * ck];
                    let mut e = T::ZERO;
                    for (&gv, &vv) in g.iter().zip(vs) {
                        e += gv * vv;
                    }
                    evals.push(e);
                    s += wt * e;
                }
                for ((&(row, off), &wt), &e) in
                    cells.iter().zip(weights.iter()).zip(evals.iter())
                {
                    let dlogit = wt * (e - s);
                    // value gradient
                    let dvrow = &mut dv[row * c + hd * ck..row * c + (hd + 1) * ck];
                    for (d, &gv) in dvrow.iter_mut().zip(g) {
                        *d += wt * gv;
                    }
                    // key and query gradients through the scaled dot product
                    let ks = &k[row * c + hd * ck..row * c + (hd + 1) * ck];
                    let dqrow = &mut dq[p * c + hd * ck..p * c + (hd + 1) * ck];
                    for (d, &kv) in dqrow.iter_mut().zip(ks) {
                        *d += dlogit * scale * kv;
                    }
                    let dkrow = &mut dk[row * c + hd * ck..row * c + (hd + 1) * ck];
                    for (d, &qv) in dkrow.iter_mut().zip(qs) {
                        *d += dlogit * scale * qv;
                    }
                    drel[hd * lambda * lambda + off] += dlogit;
                }
            }
        }
    }
    (dq, dk, dv, drel)
}

/// Short-term attention from unprojected frame features: projects the current
/// frame and each neighbor frame with the shared `wk`/`wv`, attaches the
/// per-frame identification embeddings to the values, runs the windowed core
/// and applies the output projection.
#[allow(clippy::too_many_arguments)]
pub fn short_term_attention<T: Scalar>(
    xt: &Tensor<T>,
    xn: &[Tensor<T>],
    en: &[Tensor<T>],
    lambda: usize,
    rel: &RelPosBias<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    w_o: &Tensor<T>,
    cfg: AttentionHeadsConfig,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if xn.is_empty() || xn.len() != en.len() {
        return Err(Error::Shape(format!(
            "short_term_attention: {} frames vs {} embeddings",
            xn.len(),
            en.len()
        )));
    }
    let q = ops::matmul(xt, wk)?;
    let mut ks = Vec::with_capacity(xn.len());
    let mut vs = Vec::with_capacity(xn.len());
    for (xf, ef) in xn.iter().zip(en) {
        ks.push(ops::matmul(xf, wk)?);
        vs.push(ops::add(&ops::matmul(xf, wv)?, ef)?);
    }
    let k_refs: Vec<&Tensor<T>> = ks.iter().collect();
    let v_refs: Vec<&Tensor<T>> = vs.iter().collect();
    let k_all = ops::concat_rows(&k_refs)?;
    let v_all = ops::concat_rows(&v_refs)?;
    let core = window_attention_core(
        &q,
        &k_all,
        &v_all,
        &rel.table,
        h,
        w,
        xn.len(),
        lambda,
        cfg.heads,
    )?;
    ops::matmul(&core, w_o)
}

/// Reference implementation of short-term attention: materializes the full
/// [h*w, n*h*w] logit bias with -inf outside each window, adds the relative
/// bias inside it, and runs the plain multi-head path. Quadratic in the frame
/// area; for verification only.
#[allow(clippy::too_many_arguments)]
pub fn windowed_attention_oracle<T: Scalar>(
    xt: &Tensor<T>,
    xn: &[Tensor<T>],
    en: &[Tensor<T>],
    lambda: usize,
    rel: &RelPosBias<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    w_o: &Tensor<T>,
    cfg: AttentionHeadsConfig,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if lambda % 2 == 0 || lambda == 0 {
        return Err(Error::Config(format!(
            "windowed_attention_oracle: window size {lambda} must be odd"
        )));
    }
    if xn.is_empty() || xn.len() != en.len() {
        return Err(Error::Shape(format!(
            "windowed_attention_oracle: {} frames vs {} embeddings",
            xn.len(),
            en.len()
        )));
    }
    let n = xn.len();
    let q = ops::matmul(xt, wk)?;
    let mut ks = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    for (xf, ef) in xn.iter().zip(en) {
        ks.push(ops::matmul(xf, wk)?);
        vs.push(ops::add(&ops::matmul(xf, wv)?, ef)?);
    }
    let k_refs: Vec<&Tensor<T>> = ks.iter().collect();
    let v_refs: Vec<&Tensor<T>> = vs.iter().collect();
    let k_all = ops::concat_rows(&k_refs)?;
    let v_all = ops::concat_rows(&v_refs)?;

    let biases = window_bias_matrices(rel, h, w, n, lambda, cfg.heads)?;
    multi_head(&q, &k_all, &v_all, w_o, cfg, Some(&biases))
}

/// Per-head dense bias matrices for the oracle: the relative bias inside each
/// window, -inf outside. Entry (p, q_cell) is finite iff |dy| <= (lambda-1)/2
/// and |dx| <= (lambda-1)/2.
pub fn window_bias_matrices<T: Scalar>(
    rel: &RelPosBias<T>,
    h: usize,
    w: usize,
    n_frames: usize,
    lambda: usize,
    heads: usize,
) -> Result<Vec<Tensor<T>>> {
    if rel.table.shape() != [heads, lambda, lambda] {
        return Err(Error::Shape(format!(
            "window_bias_matrices: bias table {:?}, expected [{heads}, {lambda}, {lambda}]",
            rel.table.shape()
        )));
    }
    let hw = h * w;
    let mut biases = Vec::with_capacity(heads);
    for hd in 0..heads {
        let mut data = vec![T::neg_infinity(); hw * n_frames * hw];
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                for (row, off) in window_cells(py, px, h, w, n_frames, lambda) {
                    data[p * n_frames * hw + row] =
                        rel.table.data()[hd * lambda * lambda + off];
                }
            }
        }
        biases.push(Tensor::from_vec_allowing_neg_inf(
            &[hw, n_frames * hw],
            data,
        )?);
    }
    Ok(biases)
}

/// Dense per-head short-term attention weights, zeros outside each window.
/// Diagnostic path used for attention-map dumps.
#[allow(clippy::too_many_arguments)]
pub fn window_attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    rel: &RelPosBias<T>,
    h: usize,
    w: usize,
    n_frames: usize,
    lambda: usize,
    heads: usize,
) -> Result<Vec<Tensor<T>>> {
    let c = q.cols();
    let cfg = AttentionHeadsConfig::new(heads, c)?;
    let ck = cfg.head_width();
    let scale = T::from_f64(1.0 / (ck as f64).sqrt());
    let hw = h * w;
    let mut maps = Vec::with_capacity(heads);
    for hd in 0..heads {
        let mut data = vec![T::ZERO; hw * n_frames * hw];
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                let cells = window_cells(py, px, h, w, n_frames, lambda);
                let qs = &q.data()[p * c + hd * ck..p * c + (hd + 1) * ck];
                let mut logits = Vec::with_capacity(cells.len());
                let mut maxv = T::neg_infinity();
                for &(row, off) in &cells {
                    let ks = &k.data()[row * c + hd * ck..row * c + (hd + 1) * ck];
                    let mut dot = T::ZERO;
                    for (&a, &b) in qs.iter().zip(ks) {
                        dot += a * b;
                    }
                    let z = dot * scale + rel.table.data()[hd * lambda * lambda + off];
                    maxv = maxv.maximum(z);
                    logits.push(z);
                }
                let mut denom = T::ZERO;
                for z in logits.iter_mut() {
                    *z = (*z - maxv).exp();
                    denom += *z;
                }
                for (&(row, _), &e) in cells.iter().zip(logits.iter()) {
                    data[p * n_frames * hw + row] = e / denom;
                }
            }
        }
        maps.push(Tensor::with_node(vec![hw, n_frames * hw], data, None));
    }
    Ok(maps)
}

/// Convenience initializer for square projection matrices.
pub fn init_projection<T: Scalar>(c: usize, rng: &mut Rng) -> Tensor<T> {
    Tensor::randn(&[c, c], 1.0 / (c as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity<T: Scalar>(n: usize) -> Tensor<T> {
        let mut data = vec![T::ZERO; n * n];
        for i in 0..n {
            data[i * n + i] = T::ONE;
        }
        Tensor::with_node(vec![n, n], data, None)
    }

    #[test]
    fn singleton_memory_returns_value_row() {
        let mut rng = Rng::seed_from(41);
        let q = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[1, 8], 1.0, &mut rng);
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        for r in 0..4 {
            for c in 0..8 {
                assert!((out.at2(r, c) - v.at2(0, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_logits_give_column_mean() {
        let mut rng = Rng::seed_from(42);
        let q = Tensor::<f64>::zeros(&[3, 4]);
        let k = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        for r in 0..3 {
            for c in 0..6 {
                let mean: f64 = (0..5).map(|j| v.at2(j, c)).sum::<f64>() / 5.0;
                assert!((out.at2(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_instance_matches_two_step_oracle() {
        let mut rng = Rng::seed_from(43);
        for &(a, b, ck, cv) in &[(4usize, 6usize, 8usize, 8usize), (6, 6, 8, 5), (3, 7, 5, 2)] {
            let q = Tensor::<f64>::randn(&[a, ck], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(&[b, ck], 1.0, &mut rng);
            let v = Tensor::<f64>::randn(&[b, cv], 1.0, &mut rng);
            let got = scaled_dot_attention(&q, &k, &v, None).unwrap();
            // Explicit two-step oracle: matmul, softmax, matmul.
            let kt = ops::transpose(&k).unwrap();
            let logits = ops::matmul(&q, &kt).unwrap();
            let scaled = ops::scale(&logits, 1.0 / (ck as f64).sqrt()).unwrap();
            let weights = ops::softmax_lastdim(&scaled).unwrap();
            let want = ops::matmul(&weights, &v).unwrap();
            assert!(got.max_abs_diff(&want) <= 1e-6);
        }
    }

    #[test]
    fn convexity_of_outputs() {
        let mut rng = Rng::seed_from(44);
        for _ in 0..20 {
            let q = Tensor::<f64>::randn(&[3, 4], 2.0, &mut rng);
            let k = Tensor::<f64>::randn(&[6, 4], 2.0, &mut rng);
            let v = Tensor::<f64>::randn(&[6, 5], 2.0, &mut rng);
            // Random mask with at least one live key per row.
            let mut bias = vec![0.0f64; 3 * 6];
            for r in 0..3 {
                for c in 0..6 {
                    if rng.next_f64() < 0.4 {
                        bias[r * 6 + c] = f64::NEG_INFINITY;
                    }
                }
                bias[r * 6 + rng.below(6)] = 0.0;
            }
            let bias = Tensor::from_vec_allowing_neg_inf(&[3, 6], bias).unwrap();
            let out = scaled_dot_attention(&q, &k, &v, Some(&bias)).unwrap();
            for r in 0..3 {
                for c in 0..5 {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for j in 0..6 {
                        if bias.at2(r, j) != f64::NEG_INFINITY {
                            lo = lo.min(v.at2(j, c));
                            hi = hi.max(v.at2(j, c));
                        }
                    }
                    let got = out.at2(r, c);
                    assert!(got >= lo - 1e-9 && got <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let q = Tensor::<f64>::zeros(&[2, 3]);
        let k = Tensor::<f64>::zeros(&[2, 3]);
        let v = Tensor::<f64>::zeros(&[2, 3]);
        let bias = Tensor::from_vec_allowing_neg_inf(
            &[2, 2],
            vec![0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
        )
        .unwrap();
        let err = scaled_dot_attention(&q, &k, &v, Some(&bias)).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)), "{err}");
    }

    #[test]
    fn single_head_identity_projection_degenerates() {
        let mut rng = Rng::seed_from(45);
        let q = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let cfg = AttentionHeadsConfig::new(1, 6).unwrap();
        let mh = multi_head(&q, &k, &v, &identity(6), cfg, None).unwrap();
        let plain = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert!(mh.max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn two_heads_equal_independent_runs() {
        let mut rng = Rng::seed_from(46);
        let q = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 8], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[5, 8], 1.0, &mut rng);
        let cfg = AttentionHeadsConfig::new(2, 8).unwrap();
        let mh = multi_head(&q, &k, &v, &identity(8), cfg, None).unwrap();
        for hd in 0..2 {
            let qs = ops::slice_cols(&q, hd * 4, (hd + 1) * 4).unwrap();
            let ks = ops::slice_cols(&k, hd * 4, (hd + 1) * 4).unwrap();
            let vs = ops::slice_cols(&v, hd * 4, (hd + 1) * 4).unwrap();
            let solo = scaled_dot_attention(&qs, &ks, &vs, None).unwrap();
            let part = ops::slice_cols(&mh, hd * 4, (hd + 1) * 4).unwrap();
            assert!(part.max_abs_diff(&solo) < 1e-12);
        }
    }

    #[test]
    fn head_permutation_with_matching_wo_rows_is_invariant() {
        let mut rng = Rng::seed_from(47);
        let q = Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let w_o = Tensor::<f64>::randn(&[8, 8], 0.5, &mut rng);
        let cfg = AttentionHeadsConfig::new(2, 8).unwrap();
        let base = multi_head(&q, &k, &v, &w_o, cfg, None).unwrap();

        // Swap the two head slices of q/k/v and the matching blocks of w_o rows.
        let swap_cols = |t: &Tensor<f64>| {
            let a = ops::slice_cols(t, 0, 4).unwrap();
            let b = ops::slice_cols(t, 4, 8).unwrap();
            ops::concat_cols(&[&b, &a]).unwrap()
        };
        let q2 = swap_cols(&q);
        let k2 = swap_cols(&k);
        let v2 = swap_cols(&v);
        let mut wdata = vec![0.0; 64];
        for r in 0..8 {
            let src = if r < 4 { r + 4 } else { r - 4 };
            wdata[r * 8..(r + 1) * 8].copy_from_slice(w_o.row(src));
        }
        let w_o2 = Tensor::from_vec(&[8, 8], wdata).unwrap();
        let permuted = multi_head(&q2, &k2, &v2, &w_o2, cfg, None).unwrap();
        assert!(base.max_abs_diff(&permuted) < 1e-12);
    }

    #[test]
    fn heads_must_divide_channels() {
        assert!(AttentionHeadsConfig::new(3, 8).is_err());
        assert!(AttentionHeadsConfig::new(2, 8).is_ok());
    }

    #[test]
    fn long_term_self_mode_reduction() {
        // T = 1, memory equals the current frame, zero embedding, identity
        // projections: plain self-attention of xt.
        let mut rng = Rng::seed_from(48);
        let xt = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let em = Tensor::<f64>::zeros(&[6, 4]);
        let eye = identity(4);
        let cfg = AttentionHeadsConfig::new(1, 4).unwrap();
        let out = long_term_attention(&xt, &xt, &em, &eye, &eye, &eye, cfg).unwrap();
        let want = scaled_dot_attention(&xt, &xt, &xt, None).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn long_term_peaked_softmax_selects_memory_row() {
        // One memory location whose key strongly aligns with the query:
        // softmax concentrates there and the output approaches value+identity.
        let c = 4;
        let eye = identity(c);
        let cfg = AttentionHeadsConfig::new(1, c).unwrap();
        let q = Tensor::<f64>::from_vec(&[1, c], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let mut xm = vec![0.1; 2 * c];
        xm[0] = 50.0;
        let xm = Tensor::from_vec(&[2, c], xm).unwrap();
        let mut em = vec![0.0; 2 * c];
        em[1] = 0.7;
        let em = Tensor::from_vec(&[2, c], em).unwrap();
        let out = long_term_attention(&q, &xm, &em, &eye, &eye, &eye, cfg).unwrap();
        let want: Vec<f64> = (0..c).map(|j| xm.at2(0, j) + em.at2(0, j)).collect();
        for j in 0..c {
            assert!((out.at2(0, j) - want[j]).abs() < 1e-6, "{j}");
        }
    }

    #[test]
    fn long_term_matches_projection_composition() {
        let mut rng = Rng::seed_from(49);
        let cfg = AttentionHeadsConfig::new(2, 8).unwrap();
        let xt = Tensor::<f64>::randn(&[5, 8], 1.0, &mut rng);
        let xm = Tensor::<f64>::randn(&[10, 8], 1.0, &mut rng);
        let em = Tensor::<f64>::randn(&[10, 8], 1.0, &mut rng);
        let wk = Tensor::<f64>::randn(&[8, 8], 0.4, &mut rng);
        let wv = Tensor::<f64>::randn(&[8, 8], 0.4, &mut rng);
        let w_o = Tensor::<f64>::randn(&[8, 8], 0.4, &mut rng);
        let got = long_term_attention(&xt, &xm, &em, &wk, &wv, &w_o, cfg).unwrap();
        // Composition oracle: explicit projections, per-head cut, attention.
        let q = ops::matmul(&xt, &wk).unwrap();
        let k = ops::matmul(&xm, &wk).unwrap();
        let v = ops::add(&ops::matmul(&xm, &wv).unwrap(), &em).unwrap();
        let want = multi_head(&q, &k, &v, &w_o, cfg, None).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-6);
    }

    #[test]
    fn siamese_logits_are_symmetric() {
        let mut rng = Rng::seed_from(50);
        let x = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let wk = Tensor::<f64>::randn(&[4, 4], 0.5, &mut rng);
        let q = ops::matmul(&x, &wk).unwrap();
        let logits = ops::matmul_nt(&q, &q).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((logits.at2(i, j) - logits.at2(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sine_table_deterministic_in_range_and_axis_separable() {
        let a = sine_pos_embed::<f32>(5, 7, 16).unwrap();
        let b = sine_pos_embed::<f32>(5, 7, 16).unwrap();
        assert_eq!(a.table, b.table, "bit-identical tables");
        for &v in a.table.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
        // Row half depends only on the row, column half only on the column.
        for y in 0..5 {
            for x in 0..7 {
                let row = a.table.row(y * 7 + x);
                let row_at_x0 = a.table.row(y * 7);
                let row_at_y0 = a.table.row(x);
                assert_eq!(&row[..8], &row_at_x0[..8], "row half at ({y},{x})");
                assert_eq!(&row[8..], &row_at_y0[8..], "col half at ({y},{x})");
            }
        }
        assert!(sine_pos_embed::<f32>(4, 4, 6).is_err(), "C % 4 != 0");
    }

    #[test]
    fn window_mask_geometry() {
        // Entry (p, q) finite iff |dy| <= (lambda-1)/2 and |dx| <= (lambda-1)/2.
        let rel = RelPosBias::<f64>::zeros(1, 3).unwrap();
        let biases = window_bias_matrices(&rel, 4, 5, 1, 3, 1).unwrap();
        let b = &biases[0];
        for py in 0..4i64 {
            for px in 0..5i64 {
                for ky in 0..4i64 {
                    for kx in 0..5i64 {
                        let inside = (py - ky).abs() <= 1 && (px - kx).abs() <= 1;
                        let v = b.at2((py * 5 + px) as usize, (ky * 5 + kx) as usize);
                        assert_eq!(v == 0.0, inside, "({py},{px}) vs ({ky},{kx})");
                        assert_eq!(v == f64::NEG_INFINITY, !inside);
                    }
                }
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn random_short_term_instance(
        rng: &mut Rng,
        h: usize,
        w: usize,
        n: usize,
        lambda: usize,
        heads: usize,
        c: usize,
    ) -> (
        Tensor<f64>,
        Vec<Tensor<f64>>,
        Vec<Tensor<f64>>,
        RelPosBias<f64>,
        Tensor<f64>,
        Tensor<f64>,
        Tensor<f64>,
    ) {
        let xt = Tensor::<f64>::randn(&[h * w, c], 1.0, rng);
        let xn: Vec<_> = (0..n)
            .map(|_| Tensor::<f64>::randn(&[h * w, c], 1.0, rng))
            .collect();
        let en: Vec<_> = (0..n)
            .map(|_| Tensor::<f64>::randn(&[h * w, c], 1.0, rng))
            .collect();
        let rel =
            RelPosBias::from_table(Tensor::<f64>::randn(&[heads, lambda, lambda], 0.5, rng))
                .unwrap();
        let wk = Tensor::<f64>::randn(&[c, c], 0.4, rng);
        let wv = Tensor::<f64>::randn(&[c, c], 0.4, rng);
        let w_o = Tensor::<f64>::randn(&[c, c], 0.4, rng);
        (xt, xn, en, rel, wk, wv, w_o)
    }

    #[test]
    fn short_term_matches_oracle_on_small_grids() {
        let mut rng = Rng::seed_from(51);
        let cfg = AttentionHeadsConfig::new(2, 8).unwrap();
        for &(h, w, n, lambda) in &[(6usize, 6usize, 1usize, 3usize), (5, 4, 2, 5), (3, 3, 3, 1)] {
            let (xt, xn, en, rel, wk, wv, w_o) =
                random_short_term_instance(&mut rng, h, w, n, lambda, 2, 8);
            let fast =
                short_term_attention(&xt, &xn, &en, lambda, &rel, &wk, &wv, &w_o, cfg, h, w)
                    .unwrap();
            let slow =
                windowed_attention_oracle(&xt, &xn, &en, lambda, &rel, &wk, &wv, &w_o, cfg, h, w)
                    .unwrap();
            assert!(
                fast.max_abs_diff(&slow) <= 1e-5,
                "grid {h}x{w} n={n} lambda={lambda}: {}",
                fast.max_abs_diff(&slow)
            );
        }
    }

    #[test]
    fn singleton_window_single_frame() {
        // lambda = 1, n = 1, zero bias: softmax over one element, so the
        // output is the projected value at the same location.
        let mut rng = Rng::seed_from(52);
        let (h, w, c) = (4, 4, 8);
        let cfg = AttentionHeadsConfig::new(2, c).unwrap();
        let (xt, xn, en, _, wk, wv, _) = random_short_term_instance(&mut rng, h, w, 1, 1, 2, c);
        let rel = RelPosBias::<f64>::zeros(2, 1).unwrap();
        let eye = identity(c);
        let out =
            short_term_attention(&xt, &xn, &en, 1, &rel, &wk, &wv, &eye, cfg, h, w).unwrap();
        let want = ops::add(&ops::matmul(&xn[0], &wv).unwrap(), &en[0]).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn saturated_window_equals_long_term() {
        // lambda covering the whole frame and zero relative bias: the window
        // constraint vanishes and short-term equals long-term over the same
        // frames.
        let mut rng = Rng::seed_from(53);
        let cfg = AttentionHeadsConfig::new(2, 8).unwrap();
        for trial in 0..50 {
            let h = 2 + rng.below(3);
            let w = 2 + rng.below(3);
            let n = 1 + rng.below(2);
            let lambda = 2 * h.max(w) - 1;
            let (xt, xn, en, _, wk, wv, w_o) =
                random_short_term_instance(&mut rng, h, w, n, lambda, 2, 8);
            let rel = RelPosBias::<f64>::zeros(2, lambda).unwrap();
            let short =
                short_term_attention(&xt, &xn, &en, lambda, &rel, &wk, &wv, &w_o, cfg, h, w)
                    .unwrap();
            let xn_refs: Vec<&Tensor<f64>> = xn.iter().collect();
            let en_refs: Vec<&Tensor<f64>> = en.iter().collect();
            let xm = ops::concat_rows(&xn_refs).unwrap();
            let em = ops::concat_rows(&en_refs).unwrap();
            let long = long_term_attention(&xt, &xm, &em, &wk, &wv, &w_o, cfg).unwrap();
            assert!(
                short.max_abs_diff(&long) <= 1e-5,
                "trial {trial}: {}",
                short.max_abs_diff(&long)
            );
        }
    }

    #[test]
    fn even_window_rejected() {
        let mut rng = Rng::seed_from(54);
        let cfg = AttentionHeadsConfig::new(1, 4).unwrap();
        let (xt, xn, en, _, wk, wv, w_o) = random_short_term_instance(&mut rng, 3, 3, 1, 3, 1, 4);
        let rel = RelPosBias::<f64>::zeros(1, 3).unwrap();
        let err = short_term_attention(&xt, &xn, &en, 4, &rel, &wk, &wv, &w_o, cfg, 3, 3)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_) | Error::Shape(_)), "{err}");
    }

    #[test]
    fn window_weight_maps_row_stochastic_inside_footprint() {
        let mut rng = Rng::seed_from(55);
        let (h, w, n, lambda, heads, c) = (5, 5, 2, 3, 2, 8);
        let q = Tensor::<f64>::randn(&[h * w, c], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[n * h * w, c], 1.0, &mut rng);
        let rel =
            RelPosBias::from_table(Tensor::<f64>::randn(&[heads, lambda, lambda], 0.3, &mut rng))
                .unwrap();
        let maps = window_attention_weights(&q, &k, &rel, h, w, n, lambda, heads).unwrap();
        for m in &maps {
            for p in 0..h * w {
                let sum: f64 = m.row(p).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                let (py, px) = (p / w, p % w);
                for (row, v) in m.row(p).iter().enumerate() {
                    let cell = row % (h * w);
                    let (ky, kx) = (cell / w, cell % w);
                    let inside = (py as i64 - ky as i64).abs() <= 1
                        && (px as i64 - kx as i64).abs() <= 1;
                    if !inside {
                        assert_eq!(*v, 0.0);
                    }
                }
            }
        }
    }
}
