//! Region and boundary metrics plus the two training losses.
//!
//! Metrics are pure functions on integer rasters. The losses are fused tape
//! nodes over probability maps: bootstrapped cross-entropy keeps only the
//! hardest fraction of pixels, and the soft Jaccard loss is the probabilistic
//! min/max intersection-over-union.

use crate::error::{Error, Result};
use crate::ident::ObjectMask;
use crate::scalar::Scalar;
use crate::tensor::{tape, Tensor};

/// Loss mix: fixed 0.5 : 0.5 combination with a configurable bootstrap
/// fraction.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub jaccard_weight: f64,
    pub bootstrap_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ce_weight: 0.5,
            jaccard_weight: 0.5,
            bootstrap_ratio: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.ce_weight + self.jaccard_weight - 1.0).abs() > 1e-9 {
            return Err(Error::Config("loss weights must sum to 1".into()));
        }
        if !(self.bootstrap_ratio > 0.0 && self.bootstrap_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "bootstrap ratio {} outside (0, 1]",
                self.bootstrap_ratio
            )));
        }
        Ok(())
    }
}

fn same_size(pred: &ObjectMask, gt: &ObjectMask) -> Result<()> {
    if pred.h() != gt.h() || pred.w() != gt.w() {
        return Err(Error::Shape(format!(
            "rasters differ: {}x{} vs {}x{}",
            pred.h(),
            pred.w(),
            gt.h(),
            gt.w()
        )));
    }
    Ok(())
}

/// Region intersection-over-union for one object; 1 when both masks are
/// empty.
pub fn region_j(pred: &ObjectMask, gt: &ObjectMask, object: usize) -> Result<f64> {
    same_size(pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.labels().iter().zip(gt.labels()) {
        let a = *p as usize == object;
        let b = *g as usize == object;
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// 4-connected boundary pixels of one object; pixels touching the image edge
/// count as boundary.
fn boundary_pixels(mask: &ObjectMask, object: usize) -> Vec<(usize, usize)> {
    let (h, w) = (mask.h(), mask.w());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.label_at(y, x) != object {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || mask.label_at(y - 1, x) != object
                || mask.label_at(y + 1, x) != object
                || mask.label_at(y, x - 1) != object
                || mask.label_at(y, x + 1) != object;
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Boundary F-measure: precision/recall of boundary pixels matched within a
/// Euclidean distance of `tol` pixels. 1 when both boundaries are empty, 0
/// when exactly one is.
pub fn boundary_f(pred: &ObjectMask, gt: &ObjectMask, object: usize, tol: usize) -> Result<f64> {
    same_size(pred, gt)?;
    let pb = boundary_pixels(pred, object);
    let gb = boundary_pixels(gt, object);
    if pb.is_empty() && gb.is_empty() {
        return Ok(1.0);
    }
    if pb.is_empty() || gb.is_empty() {
        return Ok(0.0);
    }
    let tol2 = (tol * tol) as i64;
    let matched = |a: &[(usize, usize)], b: &[(usize, usize)]| -> usize {
        a.iter()
            .filter(|&&(ay, ax)| {
                b.iter().any(|&(by, bx)| {
                    let dy = ay as i64 - by as i64;
                    let dx = ax as i64 - bx as i64;
                    dy * dy + dx * dx <= tol2
                })
            })
            .count()
    };
    let precision = matched(&pb, &gb) as f64 / pb.len() as f64;
    let recall = matched(&gb, &pb) as f64 / gb.len() as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Mean J over the annotated targets (background slot 0 excluded).
pub fn mean_region_j(pred: &ObjectMask, gt: &ObjectMask) -> Result<f64> {
    let n = gt.n().max(pred.n());
    if n < 2 {
        return Err(Error::Mask("mean_region_j: no targets".into()));
    }
    let mut sum = 0.0;
    for obj in 1..n {
        sum += region_j(pred, gt, obj)?;
    }
    Ok(sum / (n - 1) as f64)
}

/// Mean boundary F over the annotated targets.
pub fn mean_boundary_f(pred: &ObjectMask, gt: &ObjectMask, tol: usize) -> Result<f64> {
    let n = gt.n().max(pred.n());
    if n < 2 {
        return Err(Error::Mask("mean_boundary_f: no targets".into()));
    }
    let mut sum = 0.0;
    for obj in 1..n {
        sum += boundary_f(pred, gt, obj, tol)?;
    }
    Ok(sum / (n - 1) as f64)
}

const PROB_FLOOR: f64 = 1e-12;

/// Bootstrapped cross-entropy: mean of -log p[gt] over the
/// ceil(ratio * pixels) pixels with the largest loss. Probabilities are
/// clamped at 1e-12 before the log; ties in the hardness ranking break by
/// pixel index.
pub fn bootstrapped_ce<T: Scalar>(
    probs: &Tensor<T>,
    gt: &ObjectMask,
    ratio: f64,
) -> Result<Tensor<T>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("bootstrap ratio {ratio} outside (0, 1]")));
    }
    let hw = gt.h() * gt.w();
    let n = gt.n();
    if probs.rank() != 2 || probs.shape()[0] != hw || probs.shape()[1] < n {
        return Err(Error::Shape(format!(
            "bootstrapped_ce: probs {:?} vs raster {hw} pixels, {n} objects",
            probs.shape()
        )));
    }
    let width = probs.shape()[1];
    let mut losses: Vec<(f64, usize)> = Vec::with_capacity(hw);
    for (p, &label) in gt.labels().iter().enumerate() {
        let pv = probs.data()[p * width + label as usize].to_f64().max(PROB_FLOOR);
        losses.push((-pv.ln(), p));
    }
    losses.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let keep = ((ratio * hw as f64).ceil() as usize).clamp(1, hw);
    let selected: Vec<usize> = losses[..keep].iter().map(|&(_, p)| p).collect();
    let value = losses[..keep].iter().map(|&(l, _)| l).sum::<f64>() / keep as f64;
    if !value.is_finite() {
        return Err(Error::Numeric("bootstrapped_ce: non-finite loss".into()));
    }

    let node = tape::record(&[probs.node()], &[], |pids| {
        let labels: Vec<u8> = gt.labels().to_vec();
        let probs_saved = probs.data().to_vec();
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                let g = adj.data()[0].to_f64();
                let mut dp = vec![T::ZERO; probs_saved.len()];
                for &p in &selected {
                    let col = labels[p] as usize;
                    let pv = probs_saved[p * width + col].to_f64();
                    if pv > PROB_FLOOR {
                        dp[p * width + col] = T::from_f64(-g / (keep as f64 * pv));
                    }
                }
                emit(px, Tensor::with_node(vec![hw, width], dp, None));
            }
        })
    });
    Ok(Tensor::with_node(Vec::new(), vec![T::from_f64(value)], node))
}

/// Soft Jaccard loss: 1 - mean over objects of
/// sum(min(p, g)) / sum(max(p, g)). An object absent from the ground truth
/// contributes zero loss. Result is in [0, 1] and equals 1 - region_j when
/// the probabilities are one-hot.
pub fn soft_jaccard<T: Scalar>(probs: &Tensor<T>, gt: &ObjectMask) -> Result<Tensor<T>> {
    let hw = gt.h() * gt.w();
    let n = gt.n();
    if probs.rank() != 2 || probs.shape()[0] != hw || probs.shape()[1] < n {
        return Err(Error::Shape(format!(
            "soft_jaccard: probs {:?} vs raster {hw} pixels, {n} objects",
            probs.shape()
        )));
    }
    let width = probs.shape()[1];
    let mut inters = vec![0.0f64; n];
    let mut unions = vec![0.0f64; n];
    let mut present = vec![false; n];
    for (p, &label) in gt.labels().iter().enumerate() {
        present[label as usize] = true;
        for obj in 0..n {
            let y = probs.data()[p * width + obj].to_f64();
            let g = (label as usize == obj) as usize as f64;
            inters[obj] += y.min(g);
            unions[obj] += y.max(g);
        }
    }
    let mut value = 0.0;
    for obj in 0..n {
        if present[obj] {
            value += 1.0 - inters[obj] / unions[obj];
        }
    }
    value /= n as f64;
    if !value.is_finite() {
        return Err(Error::Numeric("soft_jaccard: non-finite loss".into()));
    }

    let node = tape::record(&[probs.node()], &[], |pids| {
        let labels: Vec<u8> = gt.labels().to_vec();
        let probs_saved = probs.data().to_vec();
        tape::bw::<T>(move |adj, emit| {
            if let Some(px) = pids[0] {
                let g = adj.data()[0].to_f64();
                let mut dp = vec![T::ZERO; probs_saved.len()];
                for obj in 0..n {
                    if !present[obj] {
                        continue;
                    }
                    let (a, b) = (inters[obj], unions[obj]);
                    for (p, &label) in labels.iter().enumerate() {
                        let y = probs_saved[p * width + obj].to_f64();
                        let is_obj = label as usize == obj;
                        // min(y, g): derivative 1 iff y strictly below g;
                        // max(y, g): derivative 1 iff y strictly above g.
                        let dmin = (is_obj && y < 1.0) as usize as f64;
                        let dmax = (!is_obj && y > 0.0) as usize as f64;
                        let dj = (dmin * b - a * dmax) / (b * b);
                        dp[p * width + obj] += T::from_f64(-g * dj / n as f64);
                    }
                }
                emit(px, Tensor::with_node(vec![hw, width], dp, None));
            }
        })
    });
    Ok(Tensor::with_node(Vec::new(), vec![T::from_f64(value)], node))
}
