//! Spatial operations over features stored as [H*W, C] row-major grids.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
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

/// Dense 2-D convolution (cross-correlation) with zero padding.
///
/// `x` is [h*w, cin]; `weight` is [kh, kw, cin, cout]; output is
/// [oh*ow, cout] with oh = (h + 2*pad - kh) / stride + 1.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[0] != h * w {
        return Err(Error::Shape(format!(
            "conv2d: input {:?} does not match grid {h}x{w}",
            x.shape()
        )));
    }
    if weight.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv2d: weight must be rank 4, got {:?}",
            weight.shape()
        )));
    }
    let (kh, kw, cin, cout) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if x.shape()[1] != cin {
        return Err(Error::Shape(format!(
            "conv2d: input channels {} vs weight {cin}",
            x.shape()[1]
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "conv2d: bias shape {:?} vs {cout} output channels",
            bias.shape()
        )));
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "conv2d: kernel {kh}x{kw} does not fit grid {h}x{w} with pad {pad}"
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;

    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::ZERO; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            orow.copy_from_slice(bias.data());
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xin = &xd[(iy as usize * w + ix as usize) * cin..][..cin];
                    let wbase = ((ky * kw + kx) * cin) * cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    check_strict(&out, "conv2d")?;
    let out_shape = vec![oh * ow, cout];
    let node = tape::record(
        &[x.node(), weight.node(), bias.node()],
        &out_shape,
        |pids| {
            let x_saved = x.data().to_vec();
            let w_saved = weight.data().to_vec();
            tape::bw::<T>(move |adj, emit| {
                let g = adj.data();
                let mut dx = if pids[0].is_some() {
                    Some(vec![T::ZERO; h * w * cin])
                } else {
                    None
                };
                let mut dw = if pids[1].is_some() {
                    Some(vec![T::ZERO; kh * kw * cin * cout])
                } else {
                    None
                };
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xoff = (iy as usize * w + ix as usize) * cin;
                                let wbase = ((ky * kw + kx) * cin) * cout;
                                for ci in 0..cin {
                                    let wrow = &w_saved[wbase + ci * cout..][..cout];
                                    if let Some(dx) = dx.as_mut() {
                                        let mut acc = T::ZERO;
                                        for (gv, wv) in grow.iter().zip(wrow) {
                                            acc += *gv * *wv;
                                        }
                                        dx[xoff + ci] += acc;
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        let xv = x_saved[xoff + ci];
                                        let drow = &mut dw[wbase + ci * cout..][..cout];
                                        for (d, gv) in drow.iter_mut().zip(grow) {
                                            *d += xv * *gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let (Some(px), Some(dx)) = (pids[0], dx) {
                    emit(px, Tensor::with_node(vec![h * w, cin], dx, None));
                }
                if let (Some(pw), Some(dw)) = (pids[1], dw) {
                    emit(pw, Tensor::with_node(vec![kh, kw, cin, cout], dw, None));
                }
                if let Some(pb) = pids[2] {
                    let mut db = vec![T::ZERO; cout];
                    for o in 0..oh * ow {
                        for (d, gv) in db.iter_mut().zip(&g[o * cout..(o + 1) * cout]) {
                            *d += *gv;
                        }
                    }
                    emit(pb, Tensor::with_node(vec![cout], db, None));
                }
            })
        },
    );
    Ok(Tensor::with_node(out_shape, out, node))
}

/// Per-channel 5x5 correlation with zero padding of 2; channels never mix.
///
/// `x` is [h*w, c]; `weight` is [5, 5, c]; `bias` is [c].
pub fn depthwise_conv2d_5x5<T: Scalar>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[0] != h * w {
        return Err(Error::Shape(format!(
            "depthwise_conv2d_5x5: input {:?} does not match grid {h}x{w}",
            x.shape()
        )));
    }
    let c = x.shape()[1];
    if weight.shape() != [5, 5, c] {
        return Err(Error::Shape(format!(
            "depthwise_conv2d_5x5: kernel shape {:?}, expected [5, 5, {c}]",
            weight.shape()
        )));
    }
    if bias.shape() != [c] {
        return Err(Error::Shape(format!(
            "depthwise_conv2d_5x5: bias shape {:?}, expected [{c}]",
            bias.shape()
        )));
    }
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::ZERO; h * w * c];
    for y in 0..h {
        for xq in 0..w {
            let orow = &mut out[(y * w + xq) * c..(y * w + xq + 1) * c];
            orow.copy_from_slice(bias.data());
            for ky in 0..5 {
                let iy = y as isize + ky as isize - 2;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..5 {
                    let ix = xq as isize + kx as isize - 2;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xin = &xd[(iy as usize * w + ix as usize) * c..][..c];
                    let wrow = &wd[(ky * 5 + kx) * c..][..c];
                    for ((o, &xv), &wv) in orow.iter_mut().zip(xin).zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    check_strict(&out, "depthwise_conv2d_5x5")?;
    let out_shape = vec![h * w, c];
    let node = tape::record(
        &[x.node(), weight.node(), bias.node()],
        &out_shape,
        |pids| {
            let x_saved = x.data().to_vec();
            let w_saved = weight.data().to_vec();
            tape::bw::<T>(move |adj, emit| {
                let g = adj.data();
                let mut dx = if pids[0].is_some() {
                    Some(vec![T::ZERO; h * w * c])
                } else {
                    None
                };
                let mut dw = if pids[1].is_some() {
                    Some(vec![T::ZERO; 5 * 5 * c])
                } else {
                    None
                };
                for y in 0..h {
                    for xq in 0..w {
                        let grow = &g[(y * w + xq) * c..(y * w + xq + 1) * c];
                        for ky in 0..5 {
                            let iy = y as isize + ky as isize - 2;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..5 {
                                let ix = xq as isize + kx as isize - 2;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xoff = (iy as usize * w + ix as usize) * c;
                                let woff = (ky * 5 + kx) * c;
                                if let Some(dx) = dx.as_mut() {
                                    for ch in 0..c {
                                        dx[xoff + ch] += grow[ch] * w_saved[woff + ch];
                                    }
                                }
                                if let Some(dw) = dw.as_mut() {
                                    for ch in 0..c {
                                        dw[woff + ch] += grow[ch] * x_saved[xoff + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                if let (Some(px), Some(dx)) = (pids[0], dx) {
                    emit(px, Tensor::with_node(vec![h * w, c], dx, None));
                }
                if let (Some(pw), Some(dw)) = (pids[1], dw) {
                    emit(pw, Tensor::with_node(vec![5, 5, c], dw, None));
                }
                if let Some(pb) = pids[2] {
                    let mut db = vec![T::ZERO; c];
                    for o in 0..h * w {
                        for (d, gv) in db.iter_mut().zip(&g[o * c..(o + 1) * c]) {
                            *d += *gv;
                        }
                    }
                    emit(pb, Tensor::with_node(vec![c], db, None));
                }
            })
        },
    );
    Ok(Tensor::with_node(out_shape, out, node))
}

/// Interpolation taps for one output axis position under half-pixel mapping.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5)
                .clamp(0.0, (in_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a [h*w, c] grid to [oh*ow, c] (half-pixel convention).
///
/// Output weights at each pixel are convex, so per-pixel probability
/// distributions stay normalized through this op.
pub fn upsample_bilinear<T: Scalar>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[0] != h * w {
        return Err(Error::Shape(format!(
            "upsample_bilinear: input {:?} does not match grid {h}x{w}",
            x.shape()
        )));
    }
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(Error::Shape("upsample_bilinear: empty extent".into()));
    }
    let c = x.shape()[1];
    let ytaps = bilinear_taps(oh, h);
    let xtaps = bilinear_taps(ow, w);
    let xd = x.data();
    let mut out = vec![T::ZERO; oh * ow * c];
    for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
            let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = T::from_f64((1.0 - fy) * fx);
            let w10 = T::from_f64(fy * (1.0 - fx));
            let w11 = T::from_f64(fy * fx);
            let orow = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            let r00 = &xd[(y0 * w + x0) * c..][..c];
            let r01 = &xd[(y0 * w + x1) * c..][..c];
            let r10 = &xd[(y1 * w + x0) * c..][..c];
            let r11 = &xd[(y1 * w + x1) * c..][..c];
            for ch in 0..c {
                orow[ch] = w00 * r00[ch] + w01 * r01[ch] + w10 * r10[ch] + w11 * r11[ch];
            }
        }
    }
    check_strict(&out, "upsample_bilinear")?;
    let out_shape = vec![oh * ow, c];
    let node = tape::record(&[x.node()], &out_shape, |pids| {
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                let ytaps = bilinear_taps(oh, h);
                let xtaps = bilinear_taps(ow, w);
                let g = adj.data();
                let mut dx = vec![T::ZERO; h * w * c];
                for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                        let grow = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                        let taps = [
                            (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                            (y0 * w + x1, (1.0 - fy) * fx),
                            (y1 * w + x0, fy * (1.0 - fx)),
                            (y1 * w + x1, fy * fx),
                        ];
                        for (off, wt) in taps {
                            let wt = T::from_f64(wt);
                            for ch in 0..c {
                                dx[off * c + ch] += wt * grow[ch];
                            }
                        }
                    }
                }
                emit(px, Tensor::with_node(vec![h * w, c], dx, None));
            }
        })
    });
    Ok(Tensor::with_node(out_shape, out, node))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut rng = Rng::seed_from(21);
        let x = Tensor::<f64>::randn(&[6 * 4, 3], 1.0, &mut rng);
        let mut k = vec![0.0; 5 * 5 * 3];
        for ch in 0..3 {
            k[(2 * 5 + 2) * 3 + ch] = 1.0; // centered delta per channel
        }
        let weight = Tensor::from_vec(&[5, 5, 3], k).unwrap();
        let bias = Tensor::zeros(&[3]);
        let y = depthwise_conv2d_5x5(&x, 6, 4, &weight, &bias).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn depthwise_constant_input_all_ones_kernel() {
        let x = Tensor::full(&[9 * 9, 1], 2.0f64);
        let weight = Tensor::full(&[5, 5, 1], 1.0f64);
        let bias = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = depthwise_conv2d_5x5(&x, 9, 9, &weight, &bias).unwrap();
        // Interior pixel sees all 25 taps.
        let center = y.data()[(4 * 9 + 4) * 1];
        assert!((center - (25.0 * 2.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn depthwise_matches_naive_six_loop_oracle() {
        let mut rng = Rng::seed_from(22);
        let (h, w, c) = (7, 7, 2);
        let x = Tensor::<f64>::randn(&[h * w, c], 1.0, &mut rng);
        let weight = Tensor::<f64>::randn(&[5, 5, c], 1.0, &mut rng);
        let bias = Tensor::<f64>::randn(&[c], 1.0, &mut rng);
        let y = depthwise_conv2d_5x5(&x, h, w, &weight, &bias).unwrap();
        for yy in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let mut want = bias.data()[ch];
                    for ky in 0..5i64 {
                        for kx in 0..5i64 {
                            let iy = yy as i64 + ky - 2;
                            let ix = xx as i64 + kx - 2;
                            if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                                want += x.data()[(iy as usize * w + ix as usize) * c + ch]
                                    * weight.data()[(ky as usize * 5 + kx as usize) * c + ch];
                            }
                        }
                    }
                    let got = y.data()[(yy * w + xx) * c + ch];
                    let rel = (got - want).abs() / (1.0 + want.abs());
                    assert!(rel <= 1e-6, "({yy},{xx},{ch}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn depthwise_rejects_wrong_kernel_shape() {
        let x = Tensor::<f64>::zeros(&[4, 2]);
        let weight = Tensor::<f64>::zeros(&[3, 3, 2]);
        let bias = Tensor::<f64>::zeros(&[2]);
        assert!(depthwise_conv2d_5x5(&x, 2, 2, &weight, &bias).is_err());
    }

    #[test]
    fn conv2d_stride2_shape_contract() {
        let x = Tensor::<f32>::zeros(&[16 * 16, 3]);
        let weight = Tensor::<f32>::zeros(&[3, 3, 3, 8]);
        let bias = Tensor::<f32>::zeros(&[8]);
        let y = conv2d(&x, 16, 16, &weight, &bias, 2, 1).unwrap();
        assert_eq!(y.shape(), &[8 * 8, 8]);
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        let mut rng = Rng::seed_from(23);
        let (h, w, cin, cout) = (5, 6, 2, 3);
        let x = Tensor::<f64>::randn(&[h * w, cin], 1.0, &mut rng);
        let weight = Tensor::<f64>::randn(&[3, 3, cin, cout], 1.0, &mut rng);
        let bias = Tensor::<f64>::randn(&[cout], 1.0, &mut rng);
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            let y = conv2d(&x, h, w, &weight, &bias, stride, pad).unwrap();
            let oh = (h + 2 * pad - 3) / stride + 1;
            let ow = (w + 2 * pad - 3) / stride + 1;
            assert_eq!(y.shape(), &[oh * ow, cout]);
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut want = bias.data()[co];
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let iy = (oy * stride) as i64 + ky - pad as i64;
                                let ix = (ox * stride) as i64 + kx - pad as i64;
                                if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                                    for ci in 0..cin {
                                        want += x.data()
                                            [(iy as usize * w + ix as usize) * cin + ci]
                                            * weight.data()[((ky as usize * 3 + kx as usize)
                                                * cin
                                                + ci)
                                                * cout
                                                + co];
                                    }
                                }
                            }
                        }
                        let got = y.data()[(oy * ow + ox) * cout + co];
                        let rel = (got - want).abs() / (1.0 + want.abs());
                        assert!(rel <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_preserves_constant_fields() {
        let x = Tensor::full(&[4 * 4, 2], 3.25f64);
        let y = upsample_bilinear(&x, 4, 4, 16, 16).unwrap();
        for &v in y.data() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_weights_are_convex_per_pixel() {
        // Distributions stay normalized: feed rows that sum to one.
        let mut rng = Rng::seed_from(24);
        let mut data = Vec::new();
        for _ in 0..9 {
            let raw: Vec<f64> = (0..3).map(|_| rng.uniform(0.1, 1.0)).collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.into_iter().map(|v| v / s));
        }
        let x = Tensor::from_vec(&[9, 3], data).unwrap();
        let y = upsample_bilinear(&x, 3, 3, 12, 12).unwrap();
        for r in 0..y.rows() {
            let sum: f64 = y.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
