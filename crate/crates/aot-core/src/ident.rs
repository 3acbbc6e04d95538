//! The identification mechanism: embed any number of object masks into one
//! shared channel space by assigning each object slot a vector from a
//! trainable identity bank, propagate them through attention values, and
//! decode per-identity logits back into per-object probabilities.
//!
//! Background occupies object slot 0 and consumes an identity of its own, so
//! a sequence with k annotated targets needs k+1 <= M identities.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

/// M trainable identity vectors of width C.
#[derive(Clone, Debug)]
pub struct IdentityBank<T: Scalar> {
    pub d: Tensor<T>,
}

impl<T: Scalar> IdentityBank<T> {
    /// Zero-mean Gaussian init with standard deviation 1/sqrt(C), keeping the
    /// embedding magnitude comparable to value projections.
    pub fn init(m: usize, c: usize, rng: &mut Rng) -> Result<IdentityBank<T>> {
        if m < 2 {
            return Err(Error::Config(format!("identity bank needs M >= 2, got {m}")));
        }
        Ok(IdentityBank {
            d: Tensor::randn(&[m, c], 1.0 / (c as f64).sqrt(), rng),
        })
    }

    pub fn from_tensor(d: Tensor<T>) -> Result<IdentityBank<T>> {
        if d.rank() != 2 || d.shape()[0] < 2 {
            return Err(Error::Config(format!(
                "identity bank tensor must be [M >= 2, C], got {:?}",
                d.shape()
            )));
        }
        Ok(IdentityBank { d })
    }

    pub fn m(&self) -> usize {
        self.d.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.d.shape()[1]
    }
}

/// Patch-wise identity bank: each identity owns a patch x patch grid of
/// sub-identity vectors, one per position inside an image patch. Summing the
/// assigned sub-identities over a patch yields a feature-resolution embedding
/// that keeps the shape information inside the patch.
#[derive(Clone, Debug)]
pub struct PatchIdentityBank<T: Scalar> {
    pub dp: Tensor<T>,
    patch: usize,
}

impl<T: Scalar> PatchIdentityBank<T> {
    /// Init so that (a) the patch-sum embedding has roughly twice unit
    /// element scale, comparable to the value projections it is added to,
    /// and (b) the derived identity directions start out orthogonal, making
    /// the signatures maximally separable before any training. Each
    /// sub-identity is the shared identity direction plus positional noise.
    pub fn init(m: usize, patch: usize, c: usize, rng: &mut Rng) -> Result<PatchIdentityBank<T>> {
        if m < 2 || patch == 0 {
            return Err(Error::Config(format!(
                "patch identity bank needs M >= 2 and a patch size, got M={m}, patch={patch}"
            )));
        }
        let directions = orthogonalized_rows(m, c, rng);
        let p2 = (patch * patch) as f64;
        let alpha = 2.0 / p2;
        let beta = 1.2 / patch as f64;
        let mut dp = vec![T::ZERO; m * patch * patch * c];
        for k in 0..m {
            for uv in 0..patch * patch {
                for ch in 0..c {
                    dp[(k * patch * patch + uv) * c + ch] = T::from_f64(
                        alpha * directions[k * c + ch] + beta * rng.normal(),
                    );
                }
            }
        }
        Ok(PatchIdentityBank {
            dp: Tensor::with_node(vec![m, patch, patch, c], dp, None),
            patch,
        })
    }

    pub fn from_tensor(dp: Tensor<T>) -> Result<PatchIdentityBank<T>> {
        if dp.rank() != 4 || dp.shape()[1] != dp.shape()[2] || dp.shape()[0] < 2 {
            return Err(Error::Config(format!(
                "patch identity bank tensor must be [M >= 2, P, P, C], got {:?}",
                dp.shape()
            )));
        }
        Ok(PatchIdentityBank {
            patch: dp.shape()[1],
            dp,
        })
    }

    pub fn m(&self) -> usize {
        self.dp.shape()[0]
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn c(&self) -> usize {
        self.dp.shape()[3]
    }

    /// Derived plain-bank view: row i is the sum of identity i's sub-identity
    /// vectors over all patch positions.
    pub fn derived_bank(&self) -> Result<IdentityBank<T>> {
        let flat = ops::reshape(&self.dp, &[self.m() * self.patch * self.patch, self.c()])?;
        let summed = ops::segment_sum_rows(&flat, self.patch * self.patch)?;
        IdentityBank::from_tensor(summed)
    }
}

/// Injective map from object slots (0 = background) to identity slots; the
/// row-selector matrix P with exactly one 1 per row and at most one per
/// column, so P P^T = I_N.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    sigma: Vec<usize>,
    m: usize,
}

impl Assignment {
    pub fn new(sigma: Vec<usize>, m: usize) -> Result<Assignment> {
        if sigma.is_empty() {
            return Err(Error::Config("assignment: no object slots".into()));
        }
        if sigma.len() > m {
            return Err(Error::Capacity {
                objects: sigma.len(),
                identities: m,
            });
        }
        let mut seen = vec![false; m];
        for &i in &sigma {
            if i >= m {
                return Err(Error::Config(format!(
                    "assignment: identity {i} out of range for M={m}"
                )));
            }
            if seen[i] {
                return Err(Error::Config(format!(
                    "assignment: identity {i} assigned twice"
                )));
            }
            seen[i] = true;
        }
        Ok(Assignment { sigma, m })
    }

    pub fn n(&self) -> usize {
        self.sigma.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn identity_of(&self, slot: usize) -> usize {
        self.sigma[slot]
    }

    pub fn slots(&self) -> &[usize] {
        &self.sigma
    }

    /// Flat `sigma=i0,i1,...` record.
    pub fn serialize(&self) -> String {
        let mut s = String::from("sigma=");
        for (i, v) in self.sigma.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v}");
        }
        s
    }

    pub fn parse(record: &str, m: usize) -> Result<Assignment> {
        let body = record
            .trim()
            .strip_prefix("sigma=")
            .ok_or_else(|| Error::Parse(format!("assignment record missing sigma=: {record}")))?;
        let sigma = body
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad assignment entry: {tok}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Assignment::new(sigma, m)
    }
}

/// Integer label raster with values in 0..n (0 = background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectMask {
    labels: Vec<u8>,
    h: usize,
    w: usize,
    n: usize,
}

impl ObjectMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>, n: usize) -> Result<ObjectMask> {
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "mask raster {}x{} needs {} labels, got {}",
                h,
                w,
                h * w,
                labels.len()
            )));
        }
        if n == 0 || n > 256 {
            return Err(Error::Mask(format!("object count {n} out of range")));
        }
        for (p, &l) in labels.iter().enumerate() {
            if l as usize >= n {
                return Err(Error::Mask(format!(
                    "pixel {p} carries label {l}, but only {n} object slots exist"
                )));
            }
        }
        Ok(ObjectMask { labels, h, w, n })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label_at(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.w + x] as usize
    }

    /// One-hot view Y in {0,1}^(HW x N); exactly one 1 per row.
    pub fn one_hot<T: Scalar>(&self) -> Tensor<T> {
        let mut data = vec![T::ZERO; self.labels.len() * self.n];
        for (p, &l) in self.labels.iter().enumerate() {
            data[p * self.n + l as usize] = T::ONE;
        }
        Tensor::with_node(vec![self.labels.len(), self.n], data, None)
    }

    /// Zero-pad (with background) to the next multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> ObjectMask {
        let ph = self.h.div_ceil(multiple) * multiple;
        let pw = self.w.div_ceil(multiple) * multiple;
        if ph == self.h && pw == self.w {
            return self.clone();
        }
        let mut labels = vec![0u8; ph * pw];
        for y in 0..self.h {
            labels[y * pw..y * pw + self.w]
                .copy_from_slice(&self.labels[y * self.w..(y + 1) * self.w]);
        }
        ObjectMask {
            labels,
            h: ph,
            w: pw,
            n: self.n,
        }
    }
}

/// Gaussian rows of unit-element scale, orthogonalized by Gram-Schmidt when
/// m <= c so every pair of identity directions starts at a right angle.
fn orthogonalized_rows(m: usize, c: usize, rng: &mut Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..c).map(|_| rng.normal()).collect())
        .collect();
    if m <= c {
        for i in 0..m {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let norm_j: f64 = rows[j].iter().map(|v| v * v).sum();
                if norm_j > 1e-12 {
                    let coef = dot / norm_j;
                    for ch in 0..c {
                        rows[i][ch] -= coef * rows[j][ch];
                    }
                }
            }
        }
    }
    // Rescale every row back to unit element scale (norm sqrt(c)).
    let target = (c as f64).sqrt();
    for row in rows.iter_mut() {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in row.iter_mut() {
                *v *= target / norm;
            }
        }
    }
    rows.into_iter().flatten().collect()
}

/// Draw a uniformly random injective assignment of `n` object slots into `m`
/// identity slots. Rejects n > m with a capacity error rather than reusing
/// identities.
pub fn sample_assignment(rng: &mut Rng, n: usize, m: usize) -> Result<Assignment> {
    if n == 0 {
        return Err(Error::Config("assignment: no object slots".into()));
    }
    if n > m {
        return Err(Error::Capacity {
            objects: n,
            identities: m,
        });
    }
    Assignment::new(rng.sample_distinct(m, n), m)
}

/// Row-select semantics of Y P D: every pixel receives the identity vector of
/// its label, E[p] = D[sigma(label(p))]. Differentiable with respect to the
/// bank.
pub fn id_embed<T: Scalar>(
    mask: &ObjectMask,
    bank: &IdentityBank<T>,
    a: &Assignment,
) -> Result<Tensor<T>> {
    if a.n() != mask.n() {
        return Err(Error::Mask(format!(
            "assignment covers {} slots, mask declares {}",
            a.n(),
            mask.n()
        )));
    }
    if a.m() != bank.m() {
        return Err(Error::Shape(format!(
            "assignment over M={} vs bank M={}",
            a.m(),
            bank.m()
        )));
    }
    let indices: Vec<usize> = mask
        .labels()
        .iter()
        .map(|&l| a.identity_of(l as usize))
        .collect();
    ops::gather_rows(&bank.d, &indices)
}

/// Patch-wise embedding of a full-resolution mask to feature resolution: for
/// each patch, sum the assigned sub-identity vectors of its pixels.
pub fn patch_id_embed<T: Scalar>(
    mask: &ObjectMask,
    bank: &PatchIdentityBank<T>,
    a: &Assignment,
) -> Result<Tensor<T>> {
    let p = bank.patch();
    if mask.h() % p != 0 || mask.w() % p != 0 {
        return Err(Error::Shape(format!(
            "patch_id_embed: raster {}x{} is not a multiple of the patch size {p}",
            mask.h(),
            mask.w()
        )));
    }
    if a.n() != mask.n() {
        return Err(Error::Mask(format!(
            "assignment covers {} slots, mask declares {}",
            a.n(),
            mask.n()
        )));
    }
    if a.m() != bank.m() {
        return Err(Error::Shape(format!(
            "assignment over M={} vs bank M={}",
            a.m(),
            bank.m()
        )));
    }
    let (gh, gw) = (mask.h() / p, mask.w() / p);
    let mut indices = Vec::with_capacity(mask.h() * mask.w());
    for qy in 0..gh {
        for qx in 0..gw {
            for u in 0..p {
                for v in 0..p {
                    let label = mask.label_at(qy * p + u, qx * p + v);
                    indices.push((a.identity_of(label) * p + u) * p + v);
                }
            }
        }
    }
    let flat = ops::reshape(&bank.dp, &[bank.m() * p * p, bank.c()])?;
    let gathered = ops::gather_rows(&flat, &indices)?;
    ops::segment_sum_rows(&gathered, p * p)
}

/// Attention with the identification embedding attached to the values:
/// Att(Q, K, V + E) with 1/sqrt(key width) scaling.
pub fn att_id<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    e: &Tensor<T>,
) -> Result<Tensor<T>> {
    if v.shape() != e.shape() {
        return Err(Error::Shape(format!(
            "att_id: value {:?} vs embedding {:?}",
            v.shape(),
            e.shape()
        )));
    }
    let ve = ops::add(v, e)?;
    crate::attn::scaled_dot_attention(q, k, &ve, None)
}

/// Select the assigned identity logits and softmax over exactly those N
/// columns, so the result never depends on unassigned identities.
pub fn decode_select<T: Scalar>(ld: &Tensor<T>, a: &Assignment) -> Result<Tensor<T>> {
    if ld.rank() != 2 || ld.cols() != a.m() {
        return Err(Error::Shape(format!(
            "decode_select: logits {:?} vs M={}",
            ld.shape(),
            a.m()
        )));
    }
    let t = ops::transpose(ld)?;
    let selected = ops::gather_rows(&t, a.slots())?;
    let back = ops::transpose(&selected)?;
    ops::softmax_lastdim(&back)
}

/// Cosine similarity between every pair of identity vectors: symmetric,
/// entries in [-1, 1], diagonal exactly 1.
pub fn cosine_matrix<T: Scalar>(bank: &IdentityBank<T>) -> Result<Tensor<T>> {
    let (m, c) = (bank.m(), bank.c());
    let mut normed = vec![T::ZERO; m * c];
    for i in 0..m {
        let row = bank.d.row(i);
        let mut sq = T::ZERO;
        for &v in row {
            sq += v * v;
        }
        if !(sq.to_f64() > 0.0) {
            return Err(Error::Numeric(format!(
                "cosine_matrix: identity {i} has zero norm"
            )));
        }
        let inv = T::ONE / sq.sqrt();
        for (o, &v) in normed[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = v * inv;
        }
    }
    let mut out = vec![T::ZERO; m * m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                out[i * m + j] = T::ONE;
                continue;
            }
            let mut dot = T::ZERO;
            for cc in 0..c {
                dot += normed[i * c + cc] * normed[j * c + cc];
            }
            out[i * m + j] = dot.maximum(-T::ONE).minimum(T::ONE);
        }
    }
    Ok(Tensor::with_node(vec![m, m], out, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_injection_for_n_equals_m_equals_one() {
        // M = 1 is below the bank minimum but the assignment itself is legal.
        let mut rng = Rng::seed_from(61);
        let a = sample_assignment(&mut rng, 1, 1).unwrap();
        assert_eq!(a.slots(), &[0]);
    }

    #[test]
    fn full_assignment_is_permutation() {
        let mut rng = Rng::seed_from(62);
        let a = sample_assignment(&mut rng, 10, 10).unwrap();
        let mut sorted = a.slots().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn assignment_deterministic_for_fixed_seed() {
        let a = sample_assignment(&mut Rng::seed_from(777), 3, 10).unwrap();
        let b = sample_assignment(&mut Rng::seed_from(777), 3, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn capacity_error_when_objects_exceed_identities() {
        let mut rng = Rng::seed_from(63);
        let err = sample_assignment(&mut rng, 11, 10).unwrap_err();
        assert!(
            matches!(err, Error::Capacity { objects: 11, identities: 10 }),
            "{err}"
        );
    }

    #[test]
    fn assignment_roundtrips_through_flat_record() {
        let a = Assignment::new(vec![4, 7, 1], 10).unwrap();
        let s = a.serialize();
        assert_eq!(s, "sigma=4,7,1");
        assert_eq!(Assignment::parse(&s, 10).unwrap(), a);
    }

    #[test]
    fn id_embed_single_pixel_row_select() {
        let mut rng = Rng::seed_from(64);
        let bank = IdentityBank::<f64>::init(10, 8, &mut rng).unwrap();
        let mask = ObjectMask::new(1, 1, vec![1], 2).unwrap();
        let a = Assignment::new(vec![4, 7], 10).unwrap();
        let e = id_embed(&mask, &bank, &a).unwrap();
        assert_eq!(e.row(0), bank.d.row(7), "pixel labeled 1 selects sigma(1)=7");
    }

    #[test]
    fn id_embed_two_pixels_select_semantics() {
        let mut rng = Rng::seed_from(65);
        let bank = IdentityBank::<f64>::init(10, 8, &mut rng).unwrap();
        let mask = ObjectMask::new(1, 2, vec![0, 1], 2).unwrap();
        let a = Assignment::new(vec![4, 7], 10).unwrap();
        let e = id_embed(&mask, &bank, &a).unwrap();
        assert_eq!(e.row(0), bank.d.row(4));
        assert_eq!(e.row(1), bank.d.row(7));
    }

    #[test]
    fn id_embed_matches_dense_matrix_product_oracle() {
        // E = Y P D with the dense row-selector matrix.
        let mut rng = Rng::seed_from(66);
        let (m, c, n, hw) = (10, 6, 3, 12);
        let bank = IdentityBank::<f64>::init(m, c, &mut rng).unwrap();
        let labels: Vec<u8> = (0..hw).map(|_| rng.below(n) as u8).collect();
        let mask = ObjectMask::new(3, 4, labels, n).unwrap();
        let a = sample_assignment(&mut rng, n, m).unwrap();
        let e = id_embed(&mask, &bank, &a).unwrap();

        let y = mask.one_hot::<f64>();
        let mut p = vec![0.0; n * m];
        for slot in 0..n {
            p[slot * m + a.identity_of(slot)] = 1.0;
        }
        let p = Tensor::from_vec(&[n, m], p).unwrap();
        let want = ops::matmul(&ops::matmul(&y, &p).unwrap(), &bank.d).unwrap();
        assert!(e.max_abs_diff(&want) <= 1e-6);
    }

    #[test]
    fn assignment_swap_equivariance() {
        // Swapping which identities two objects receive swaps exactly the
        // corresponding embedding rows at those objects' pixels.
        let mut rng = Rng::seed_from(67);
        let bank = IdentityBank::<f64>::init(10, 4, &mut rng).unwrap();
        let labels: Vec<u8> = vec![0, 1, 2, 1, 0, 2, 2, 0];
        let mask = ObjectMask::new(2, 4, labels.clone(), 3).unwrap();
        let a1 = Assignment::new(vec![2, 5, 8], 10).unwrap();
        let a2 = Assignment::new(vec![2, 8, 5], 10).unwrap(); // objects 1 and 2 swapped
        let e1 = id_embed(&mask, &bank, &a1).unwrap();
        let e2 = id_embed(&mask, &bank, &a2).unwrap();
        for (p, &l) in labels.iter().enumerate() {
            match l {
                0 => assert_eq!(e1.row(p), e2.row(p), "background row unchanged"),
                1 => {
                    assert_eq!(e1.row(p), bank.d.row(5));
                    assert_eq!(e2.row(p), bank.d.row(8));
                }
                2 => {
                    assert_eq!(e1.row(p), bank.d.row(8));
                    assert_eq!(e2.row(p), bank.d.row(5));
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn patch_embed_uniform_patch_is_256_term_sum() {
        let mut rng = Rng::seed_from(68);
        let bank = PatchIdentityBank::<f64>::init(4, 16, 5, &mut rng).unwrap();
        let mask = ObjectMask::new(16, 16, vec![1; 256], 2).unwrap();
        let a = Assignment::new(vec![0, 3], 4).unwrap();
        let e = patch_id_embed(&mask, &bank, &a).unwrap();
        assert_eq!(e.shape(), &[1, 5]);
        let mut want = vec![0.0; 5];
        for u in 0..16 {
            for v in 0..16 {
                for ch in 0..5 {
                    want[ch] += bank.dp.data()[((3 * 16 + u) * 16 + v) * 5 + ch];
                }
            }
        }
        for ch in 0..5 {
            assert!((e.data()[ch] - want[ch]).abs() < 1e-9);
        }
    }

    #[test]
    fn patch_embed_split_patch_matches_per_pixel_loop() {
        let mut rng = Rng::seed_from(69);
        let bank = PatchIdentityBank::<f64>::init(5, 16, 4, &mut rng).unwrap();
        // 16x32 raster: the left patch is half label 1 / half label 2 split
        // by columns; the right patch is mixed randomly.
        let mut labels = vec![0u8; 16 * 32];
        for y in 0..16 {
            for x in 0..16 {
                labels[y * 32 + x] = if x < 8 { 1 } else { 2 };
            }
            for x in 16..32 {
                labels[y * 32 + x] = rng.below(3) as u8;
            }
        }
        let mask = ObjectMask::new(16, 32, labels.clone(), 3).unwrap();
        let a = Assignment::new(vec![4, 0, 2], 5).unwrap();
        let e = patch_id_embed(&mask, &bank, &a).unwrap();
        assert_eq!(e.shape(), &[2, 4]);
        // Per-pixel summation oracle.
        for q in 0..2 {
            let mut want = vec![0.0; 4];
            for u in 0..16 {
                for v in 0..16 {
                    let label = labels[u * 32 + q * 16 + v] as usize;
                    let id = a.identity_of(label);
                    for ch in 0..4 {
                        want[ch] += bank.dp.data()[((id * 16 + u) * 16 + v) * 4 + ch];
                    }
                }
            }
            for ch in 0..4 {
                assert!((e.at2(q, ch) - want[ch]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn patch_embed_all_background_rows_identical() {
        let mut rng = Rng::seed_from(70);
        let bank = PatchIdentityBank::<f64>::init(3, 16, 4, &mut rng).unwrap();
        let mask = ObjectMask::new(32, 48, vec![0; 32 * 48], 1).unwrap();
        let a = Assignment::new(vec![2], 3).unwrap();
        let e = patch_id_embed(&mask, &bank, &a).unwrap();
        assert_eq!(e.shape(), &[2 * 3, 4]);
        for q in 1..6 {
            assert_eq!(e.row(q), e.row(0), "uniform mask is translation invariant");
        }
    }

    #[test]
    fn patch_embed_requires_multiple_of_patch() {
        let mut rng = Rng::seed_from(71);
        let bank = PatchIdentityBank::<f64>::init(3, 16, 4, &mut rng).unwrap();
        let mask = ObjectMask::new(20, 16, vec![0; 20 * 16], 1).unwrap();
        let a = Assignment::new(vec![0], 3).unwrap();
        assert!(matches!(
            patch_id_embed(&mask, &bank, &a),
            Err(Error::Shape(_))
        ));
        let padded = mask.pad_to_multiple(16);
        assert_eq!((padded.h(), padded.w()), (32, 16));
        assert!(patch_id_embed(&padded, &bank, &a).is_ok());
    }

    #[test]
    fn patch_bank_consistency_with_plain_bank() {
        // All 256 sub-identities of identity i equal to d: patch embedding of
        // a uniform patch equals 256 d, and id_embed on the 1/16-downsampled
        // mask with a bank row of 256 d gives the same value.
        let (m, c, p) = (3, 4, 16);
        let mut dp = vec![0.0f64; m * p * p * c];
        let d_row = [0.3, -0.7, 1.1, 0.05];
        for u in 0..p {
            for v in 0..p {
                for ch in 0..c {
                    dp[((1 * p + u) * p + v) * c + ch] = d_row[ch];
                }
            }
        }
        let patch_bank =
            PatchIdentityBank::from_tensor(Tensor::from_vec(&[m, p, p, c], dp).unwrap()).unwrap();
        let mask = ObjectMask::new(16, 16, vec![0; 256], 1).unwrap();
        let a = Assignment::new(vec![1], m).unwrap();
        let via_patch = patch_id_embed(&mask, &patch_bank, &a).unwrap();

        let mut plain = vec![0.0f64; m * c];
        for ch in 0..c {
            plain[c + ch] = 256.0 * d_row[ch];
        }
        let plain_bank = IdentityBank::from_tensor(Tensor::from_vec(&[m, c], plain).unwrap())
            .unwrap();
        let down = ObjectMask::new(1, 1, vec![0], 1).unwrap();
        let via_plain = id_embed(&down, &plain_bank, &a).unwrap();
        assert!(via_patch.max_abs_diff(&via_plain) <= 1e-6);

        // The derived view agrees with the explicit 256-term sum.
        let derived = patch_bank.derived_bank().unwrap();
        assert!(derived.d.max_abs_diff(&plain_bank.d) <= 1e-9);
    }

    #[test]
    fn att_id_zero_embedding_is_plain_attention() {
        let mut rng = Rng::seed_from(72);
        let q = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let e = Tensor::<f64>::zeros(&[5, 6]);
        let got = att_id(&q, &k, &v, &e).unwrap();
        let want = crate::attn::scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn att_id_singleton_memory_ignores_query() {
        let mut rng = Rng::seed_from(73);
        let q = Tensor::<f64>::randn(&[4, 3], 5.0, &mut rng);
        let k = Tensor::<f64>::randn(&[1, 3], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[1, 2], 1.0, &mut rng);
        let e = Tensor::<f64>::randn(&[1, 2], 1.0, &mut rng);
        let out = att_id(&q, &k, &v, &e).unwrap();
        for r in 0..4 {
            for c in 0..2 {
                assert!((out.at2(r, c) - (v.at2(0, c) + e.at2(0, c))).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn att_id_matches_softmax_matmul_composition() {
        let mut rng = Rng::seed_from(74);
        let q = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
        let e = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
        let got = att_id(&q, &k, &v, &e).unwrap();
        let ve = ops::add(&v, &e).unwrap();
        let logits = ops::matmul_nt(&q, &k).unwrap();
        let scaled = ops::scale(&logits, 1.0 / 5.0f64.sqrt()).unwrap();
        let want = ops::matmul(&ops::softmax_lastdim(&scaled).unwrap(), &ve).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-6);
    }

    #[test]
    fn decode_select_full_selection_is_plain_softmax() {
        let mut rng = Rng::seed_from(75);
        let ld = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let a = Assignment::new(vec![0, 1, 2, 3], 4).unwrap();
        let got = decode_select(&ld, &a).unwrap();
        let want = ops::softmax_lastdim(&ld).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn decode_select_tie_and_closed_form() {
        let ld = Tensor::from_vec(&[1, 5], vec![2.0, -1.0, 2.0, 0.0, 3f64.ln()]).unwrap();
        let tie = decode_select(&ld, &Assignment::new(vec![0, 2], 5).unwrap()).unwrap();
        assert!((tie.data()[0] - 0.5).abs() < 1e-12);
        assert!((tie.data()[1] - 0.5).abs() < 1e-12);

        // Selected logits [0, ln 3] -> [0.25, 0.75].
        let pair = decode_select(&ld, &Assignment::new(vec![3, 4], 5).unwrap()).unwrap();
        assert!((pair.data()[0] - 0.25).abs() < 1e-12);
        assert!((pair.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn decode_select_matches_gather_then_softmax_oracle() {
        // Independent per-pixel oracle in double precision, exact to 1e-12.
        let mut rng = Rng::seed_from(76);
        for _ in 0..10 {
            let (hw, m, n) = (7, 9, 4);
            let ld = Tensor::<f64>::randn(&[hw, m], 2.0, &mut rng);
            let a = sample_assignment(&mut rng, n, m).unwrap();
            let got = decode_select(&ld, &a).unwrap();
            for p in 0..hw {
                let picked: Vec<f64> =
                    (0..n).map(|s| ld.at2(p, a.identity_of(s))).collect();
                let maxv = picked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = picked.iter().map(|v| (v - maxv).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for s in 0..n {
                    assert!(
                        (got.at2(p, s) - exps[s] / denom).abs() <= 1e-12,
                        "pixel {p} slot {s}"
                    );
                }
            }
        }
    }

    #[test]
    fn decode_select_independent_of_unassigned_logits() {
        let mut rng = Rng::seed_from(77);
        let ld = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let a = Assignment::new(vec![1, 4], 6).unwrap();
        let base = decode_select(&ld, &a).unwrap();
        // Perturb every unassigned column.
        let mut data = ld.data().to_vec();
        for p in 0..4 {
            for col in [0usize, 2, 3, 5] {
                data[p * 6 + col] += 100.0;
            }
        }
        let ld2 = Tensor::from_vec(&[4, 6], data).unwrap();
        let same = decode_select(&ld2, &a).unwrap();
        assert!(base.max_abs_diff(&same) < 1e-15);
    }

    #[test]
    fn cosine_matrix_orthogonal_rows_give_identity() {
        let d = Tensor::from_vec(&[3, 3], vec![2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.1])
            .unwrap();
        let bank = IdentityBank::from_tensor(d).unwrap();
        let cm = cosine_matrix(&bank).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((cm.at2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_matrix_duplicated_row_and_symmetry() {
        let mut rng = Rng::seed_from(78);
        let mut d = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng).data().to_vec();
        let dup: Vec<f64> = d[7..14].to_vec();
        d[28..35].copy_from_slice(&dup); // row 4 duplicates row 1
        let bank = IdentityBank::from_tensor(Tensor::from_vec(&[5, 7], d).unwrap()).unwrap();
        let cm = cosine_matrix(&bank).unwrap();
        assert!((cm.at2(1, 4) - 1.0).abs() < 1e-12);
        for i in 0..5 {
            assert_eq!(cm.at2(i, i), 1.0, "diagonal exactly 1");
            for j in 0..5 {
                assert!((cm.at2(i, j) - cm.at2(j, i)).abs() < 1e-7);
                assert!((-1.0..=1.0).contains(&cm.at2(i, j)));
            }
        }
    }

    #[test]
    fn cosine_matrix_rejects_zero_norm_row() {
        let d = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let bank = IdentityBank::from_tensor(d).unwrap();
        assert!(matches!(cosine_matrix(&bank), Err(Error::Numeric(_))));
    }
}
