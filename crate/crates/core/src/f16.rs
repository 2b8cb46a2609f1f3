//! IEEE 754 binary16 emulation.
//!
//! Every arithmetic operation is evaluated exactly (or at binary64 precision,
//! which is more than `2 * 11 + 2` bits) and then rounded once to binary16
//! with ties-to-even, so results are bit-reproducible on any host.
//!
//! Elementary functions (`exp`, `rsqrt`) are evaluated in binary32 through
//! `libm` and then rounded to binary16. The reference model and the
//! simulator both go through this module, so they agree bit for bit.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// A binary16 value stored as its raw bit pattern.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct F16(u16);

const SIGN_MASK: u16 = 0x8000;
const EXP_MASK: u16 = 0x7C00;
const MAN_MASK: u16 = 0x03FF;

impl F16 {
    pub const ZERO: F16 = F16(0x0000);
    pub const ONE: F16 = F16(0x3C00);
    pub const INFINITY: F16 = F16(0x7C00);
    pub const NEG_INFINITY: F16 = F16(0xFC00);
    pub const NAN: F16 = F16(0x7E00);
    /// Largest finite value, 65504.
    pub const MAX: F16 = F16(0x7BFF);

    pub const fn from_bits(bits: u16) -> Self {
        F16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round a binary64 value to the nearest binary16, ties to even.
    pub fn from_f64(x: f64) -> Self {
        f16_round(x)
    }

    pub fn from_f32(x: f32) -> Self {
        f16_round(x as f64)
    }

    /// Exact conversion to binary64.
    pub fn to_f64(self) -> f64 {
        let sign = if self.0 & SIGN_MASK != 0 { -1.0 } else { 1.0 };
        let exp = (self.0 & EXP_MASK) >> 10;
        let man = (self.0 & MAN_MASK) as f64;
        match exp {
            0 => sign * man * 2f64.powi(-24),
            0x1F => {
                if man == 0.0 {
                    sign * f64::INFINITY
                } else {
                    f64::NAN
                }
            }
            e => sign * (1024.0 + man) * 2f64.powi(e as i32 - 25),
        }
    }

    /// Exact conversion to binary32.
    pub fn to_f32(self) -> f32 {
        self.to_f64() as f32
    }

    pub fn is_nan(self) -> bool {
        self.0 & EXP_MASK == EXP_MASK && self.0 & MAN_MASK != 0
    }

    pub fn is_infinite(self) -> bool {
        self.0 & !SIGN_MASK == EXP_MASK
    }

    pub fn is_finite(self) -> bool {
        self.0 & EXP_MASK != EXP_MASK
    }

    pub fn is_sign_negative(self) -> bool {
        self.0 & SIGN_MASK != 0
    }

    pub fn abs(self) -> Self {
        F16(self.0 & !SIGN_MASK)
    }

    /// IEEE maxNum-style maximum; a NaN operand yields the other operand.
    pub fn max(self, other: Self) -> Self {
        if self.is_nan() {
            return other;
        }
        if other.is_nan() {
            return self;
        }
        if other.to_f64() > self.to_f64() {
            other
        } else {
            self
        }
    }

    pub fn sqrt(self) -> Self {
        f16_round(self.to_f64().sqrt())
    }

    pub fn recip(self) -> Self {
        f16_round(1.0 / self.to_f64())
    }

    /// `e^x`, evaluated in binary32 and rounded to binary16.
    pub fn exp(self) -> Self {
        F16::from_f32(libm::expf(self.to_f32()))
    }

    /// `1 / sqrt(x)`, evaluated in binary32 and rounded to binary16.
    pub fn rsqrt(self) -> Self {
        F16::from_f32(1.0f32 / libm::sqrtf(self.to_f32()))
    }

    /// Round to the nearest integer, ties to even. NaN maps to 0.
    pub fn round_ties_even_i64(self) -> i64 {
        let v = self.to_f64();
        if v.is_nan() {
            return 0;
        }
        // binary16 magnitudes are below 2^16, infinities saturate.
        v.round_ties_even().clamp(i64::MIN as f64, i64::MAX as f64) as i64
    }

    pub fn partial_cmp_value(self, other: Self) -> Option<Ordering> {
        self.to_f64().partial_cmp(&other.to_f64())
    }
}

impl fmt::Debug for F16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(0x{:04X})", self.to_f64(), self.0)
    }
}

impl fmt::Display for F16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f64(), f)
    }
}

impl From<F16> for f64 {
    fn from(v: F16) -> f64 {
        v.to_f64()
    }
}

impl Add for F16 {
    type Output = F16;
    fn add(self, rhs: F16) -> F16 {
        f16_round(self.to_f64() + rhs.to_f64())
    }
}

impl Sub for F16 {
    type Output = F16;
    fn sub(self, rhs: F16) -> F16 {
        f16_round(self.to_f64() - rhs.to_f64())
    }
}

impl Mul for F16 {
    type Output = F16;
    fn mul(self, rhs: F16) -> F16 {
        f16_round(self.to_f64() * rhs.to_f64())
    }
}

impl Div for F16 {
    type Output = F16;
    fn div(self, rhs: F16) -> F16 {
        f16_round(self.to_f64() / rhs.to_f64())
    }
}

impl Neg for F16 {
    type Output = F16;
    fn neg(self) -> F16 {
        F16(self.0 ^ SIGN_MASK)
    }
}

/// Nearest binary16 value to `x`, ties to even. Overflow rounds to infinity.
pub fn f16_round(x: f64) -> F16 {
    if x.is_nan() {
        return F16::NAN;
    }
    let sign: u16 = if x.is_sign_negative() { SIGN_MASK } else { 0 };
    let a = x.abs();
    // 65520 is the midpoint between 65504 and 2^16; ties go to the even
    // (infinite) side.
    if a >= 65520.0 {
        return F16(sign | EXP_MASK);
    }
    if a < 2f64.powi(-14) {
        // Subnormal range: the quantum is 2^-24. Scaling by a power of two
        // is exact in binary64.
        let m = (a * 2f64.powi(24)).round_ties_even() as u16;
        // m == 1024 is the smallest normal, whose encoding is exactly 0x0400.
        return F16(sign | m);
    }
    let mut e = exponent_of(a);
    let mut q = (a * 2f64.powi(10 - e)).round_ties_even() as u32;
    if q == 2048 {
        e += 1;
        q = 1024;
    }
    debug_assert!((-14..=15).contains(&e), "exponent {e} out of range");
    F16(sign | (((e + 15) as u16) << 10) | (q - 1024) as u16)
}

/// floor(log2(a)) for a positive normal binary64, read from the bit pattern.
fn exponent_of(a: f64) -> i32 {
    ((a.to_bits() >> 52) & 0x7FF) as i32 - 1023
}
