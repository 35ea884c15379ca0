//! IEEE-754 working formats and the scalar trait every kernel is generic over.
//!
//! Three formats are supported: binary16, binary32 and binary64. binary32 and
//! binary64 map onto the native `f32`/`f64` types, whose arithmetic already
//! rounds to nearest-even after every operation (Rust never contracts a
//! multiply and an add into an FMA). binary16 is emulated by [`F16`].

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Floating-point working format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Precision {
    B16,
    B32,
    B64,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::B16, Precision::B32, Precision::B64];

    /// Machine epsilon: 2⁻¹⁰, 2⁻²³, 2⁻⁵².
    pub const fn epsilon(self) -> f64 {
        match self {
            Precision::B16 => 9.765625e-4,
            Precision::B32 => 1.1920928955078125e-7,
            Precision::B64 => f64::EPSILON,
        }
    }

    pub const fn bits(self) -> u32 {
        match self {
            Precision::B16 => 16,
            Precision::B32 => 32,
            Precision::B64 => 64,
        }
    }

    /// Rounds an `f64` to the nearest value of this format (ties to even) and
    /// returns it widened back to `f64`.
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::B16 => F16::from_f64(v).to_f64(),
            Precision::B32 => v as f32 as f64,
            Precision::B64 => v,
        }
    }
}

/// Runs `$body` with `$T` bound to the scalar type of a runtime precision.
#[macro_export]
macro_rules! with_precision {
    ($p:expr, $T:ident => $body:expr) => {
        match $p {
            $crate::precision::Precision::B16 => {
                type $T = $crate::precision::F16;
                $body
            }
            $crate::precision::Precision::B32 => {
                type $T = f32;
                $body
            }
            $crate::precision::Precision::B64 => {
                type $T = f64;
                $body
            }
        }
    };
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown precision {0:?} (expected 16, 32 or 64)")]
pub struct ParsePrecisionError(String);

impl FromStr for Precision {
    type Err = ParsePrecisionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().trim_start_matches('b') {
            "16" => Ok(Precision::B16),
            "32" => Ok(Precision::B32),
            "64" => Ok(Precision::B64),
            _ => Err(ParsePrecisionError(s.to_string())),
        }
    }
}

/// Scalar type of a working format.
///
/// Every arithmetic operator rounds once into the format. `from_f64` rounds
/// to nearest-even; `to_f64` is exact.
pub trait Real:
    Copy
    + Default
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
{
    const PRECISION: Precision;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Raw IEEE bit pattern, zero-extended (16, 32 or 64 significant bits).
    fn to_bits(self) -> u64;

    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn abs(self) -> Self {
        if self < Self::ZERO {
            -self
        } else {
            self
        }
    }

    fn is_nan(self) -> bool {
        self != self
    }

    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }

    /// Bitwise equality (distinguishes ±0 and compares NaN payloads).
    fn bit_eq(self, other: Self) -> bool {
        self.to_bits() == other.to_bits()
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::B64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn to_bits(self) -> u64 {
        f64::to_bits(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::B32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn to_bits(self) -> u64 {
        f32::to_bits(self) as u64
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f32::ln(self)
    }
}

/// IEEE-754 binary16 value.
///
/// The value is held in an `f32` container that only ever contains numbers
/// lying on the binary16 grid. Each operation is evaluated in binary32 and
/// rounded to binary16 (nearest-even). binary32 carries 24 significand bits,
/// at least 2·11+2, so the double rounding is innocuous for `+ − × ÷ √` and
/// the result equals a single correctly rounded binary16 operation.
#[derive(Clone, Copy, Default, PartialEq, PartialOrd)]
#[repr(transparent)]
pub struct F16(f32);

/// Largest finite binary16 value.
const F16_MAX: f32 = 65504.0;
/// Smallest positive normal binary16 value (2⁻¹⁴).
const F16_MIN_NORMAL: f32 = 6.103_515_6e-5;

/// Rounds an `f32` to the binary16 grid, ties to even. Branch-free on the
/// finite path so loops over it vectorize.
#[inline(always)]
fn round_f32_to_f16_grid(x: f32) -> f32 {
    let bits = x.to_bits();
    // Normal range: round the 23-bit significand to 10 bits.
    let lsb = (bits >> 13) & 1;
    let normal = f32::from_bits((bits.wrapping_add(0x0FFF + lsb)) & !0x1FFF);
    // Subnormal range: absolute grid of 2⁻²⁴. Adding 0.75 (whose binary32
    // ulp is 2⁻²⁴) rounds |x| < 2⁻¹⁴ onto that grid; the sign of zero is kept.
    let sub = ((x + 0.75) - 0.75).copysign(x);
    let ax = x.abs();
    let r = if ax < F16_MIN_NORMAL { sub } else { normal };
    let r = if r.abs() > F16_MAX {
        f32::INFINITY.copysign(x)
    } else {
        r
    };
    if x.is_nan() {
        x
    } else {
        r
    }
}

impl F16 {
    pub const MAX: F16 = F16(F16_MAX);
    pub const EPSILON: F16 = F16(9.765625e-4);

    #[inline(always)]
    pub fn from_f32(v: f32) -> Self {
        F16(round_f32_to_f16_grid(v))
    }

    /// Rounds directly from binary64 (a single rounding, no detour through
    /// binary32).
    pub fn from_f64_exact_rounding(v: f64) -> Self {
        F16(half::f16::from_f64(v).to_f32())
    }

    #[inline(always)]
    pub fn to_f32(self) -> f32 {
        self.0
    }

    /// 16-bit IEEE payload.
    pub fn to_bits16(self) -> u16 {
        half::f16::from_f32(self.0).to_bits()
    }

    pub fn from_bits16(bits: u16) -> Self {
        F16(half::f16::from_bits(bits).to_f32())
    }
}

impl fmt::Debug for F16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}f16", self.0)
    }
}

impl fmt::Display for F16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

macro_rules! f16_binop {
    ($tr:ident, $method:ident, $op:tt) => {
        impl $tr for F16 {
            type Output = F16;
            #[inline(always)]
            fn $method(self, rhs: F16) -> F16 {
                F16::from_f32(self.0 $op rhs.0)
            }
        }
    };
}

f16_binop!(Add, add, +);
f16_binop!(Sub, sub, -);
f16_binop!(Mul, mul, *);
f16_binop!(Div, div, /);

impl AddAssign for F16 {
    #[inline(always)]
    fn add_assign(&mut self, rhs: F16) {
        *self = *self + rhs;
    }
}

impl Neg for F16 {
    type Output = F16;
    #[inline(always)]
    fn neg(self) -> F16 {
        F16(-self.0)
    }
}

impl Real for F16 {
    const PRECISION: Precision = Precision::B16;
    const ZERO: Self = F16(0.0);
    const ONE: Self = F16(1.0);

    #[inline]
    fn from_f64(v: f64) -> Self {
        F16::from_f64_exact_rounding(v)
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self.0 as f64
    }
    fn to_bits(self) -> u64 {
        self.to_bits16() as u64
    }
    #[inline]
    fn sqrt(self) -> Self {
        F16::from_f32(self.0.sqrt())
    }
    // Transcendentals go through binary64 and are rounded once.
    fn exp(self) -> Self {
        F16::from_f64((self.0 as f64).exp())
    }
    fn ln(self) -> Self {
        F16::from_f64((self.0 as f64).ln())
    }
}

/// Total order helper for sorting values of any format (NaN last).
pub fn total_cmp<T: Real>(a: &T, b: &T) -> Ordering {
    a.to_f64().total_cmp(&b.to_f64())
}
