//! Element types for tensors: f32 for the runtime profile, f64 for gradient
//! verification. Kernels are written once over [`Scalar`] and computed in the
//! native precision of the element type.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// On-disk dtype tag used by the tensor file format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    Single = 0,
    Double = 1,
}

impl Dtype {
    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::Single),
            1 => Some(Dtype::Double),
            _ => None,
        }
    }
}

pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn is_nan(self) -> bool;
    fn neg_infinity() -> Self;
    fn infinity() -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn to_le_bytes8(self) -> Vec<u8>;
    fn byte_width() -> usize;
    fn from_le_bytes(bytes: &[u8]) -> Self;

    #[doc(hidden)]
    fn tape_cell() -> &'static std::thread::LocalKey<
        std::cell::RefCell<Option<crate::tensor::tape::TapeInner<Self>>>,
    >;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::Single;
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;

    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn ln(self) -> f32 {
        f32::ln(self)
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn abs(self) -> f32 {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn is_nan(self) -> bool {
        f32::is_nan(self)
    }
    fn neg_infinity() -> f32 {
        f32::NEG_INFINITY
    }
    fn infinity() -> f32 {
        f32::INFINITY
    }
    fn maximum(self, other: f32) -> f32 {
        f32::max(self, other)
    }
    fn minimum(self, other: f32) -> f32 {
        f32::min(self, other)
    }
    fn to_le_bytes8(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn byte_width() -> usize {
        4
    }
    fn from_le_bytes(bytes: &[u8]) -> f32 {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    fn tape_cell() -> &'static std::thread::LocalKey<
        std::cell::RefCell<Option<crate::tensor::tape::TapeInner<f32>>>,
    > {
        &crate::tensor::tape::TAPE_SLOT_F32
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::Double;
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;

    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn is_nan(self) -> bool {
        f64::is_nan(self)
    }
    fn neg_infinity() -> f64 {
        f64::NEG_INFINITY
    }
    fn infinity() -> f64 {
        f64::INFINITY
    }
    fn maximum(self, other: f64) -> f64 {
        f64::max(self, other)
    }
    fn minimum(self, other: f64) -> f64 {
        f64::min(self, other)
    }
    fn to_le_bytes8(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn byte_width() -> usize {
        8
    }
    fn from_le_bytes(bytes: &[u8]) -> f64 {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }

    fn tape_cell() -> &'static std::thread::LocalKey<
        std::cell::RefCell<Option<crate::tensor::tape::TapeInner<f64>>>,
    > {
        &crate::tensor::tape::TAPE_SLOT_F64
    }
}

/// Error function, accurate to roughly 1e-15 over the whole real line.
///
/// Maclaurin series below |x| = 2, Laplace continued fraction for the
/// complementary function above. Both computed in f64 regardless of the
/// tensor element type.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    if ax <= 2.0 {
        // erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))
        let x2 = ax * ax;
        let mut term = ax;
        let mut sum = ax;
        let mut n = 1.0f64;
        loop {
            term *= -x2 / n;
            let contrib = term / (2.0 * n + 1.0);
            sum += contrib;
            if contrib.abs() < 1e-18 * sum.abs().max(1e-300) {
                break;
            }
            n += 1.0;
            if n > 200.0 {
                break;
            }
        }
        sign * sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // erfc(x) = exp(-x^2) / (x sqrt(pi)) * 1/(1 + v1/(1 + v2/(1 + ...)))
        // with v_n = n / (2 x^2); evaluated by backward recurrence.
        let x2 = ax * ax;
        let mut f = 0.0f64;
        for n in (1..=64u32).rev() {
            f = (n as f64 / (2.0 * x2)) / (1.0 + f);
        }
        let erfc = (-x2).exp() / (ax * std::f64::consts::PI.sqrt()) / (1.0 + f);
        sign * (1.0 - erfc)
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
