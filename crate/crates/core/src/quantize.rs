//! Weight binarization, elastic activation quantization and the bit-level
//! clip logic of the hardware quantization unit.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::f16::{f16_round, F16};
use crate::tensor::{check_bits, code_range, BinWeight, QTensor, SignMatrix, Signedness};

/// Frozen parameters of one elastic quantizer site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub scale: F16,
    /// Reciprocal of `scale`, computed once offline.
    pub inv_scale: F16,
    pub bias: F16,
    pub bit_width: u32,
    pub signedness: Signedness,
}

impl ElasticParams {
    pub fn new(scale: F16, bias: F16, bit_width: u32, signedness: Signedness) -> Result<Self> {
        let inv_scale = f16_round(1.0 / scale.to_f64());
        Self::with_inv_scale(scale, inv_scale, bias, bit_width, signedness)
    }

    /// Rebuild from stored fields; `inv_scale` must be the rounded reciprocal.
    pub fn with_inv_scale(
        scale: F16,
        inv_scale: F16,
        bias: F16,
        bit_width: u32,
        signedness: Signedness,
    ) -> Result<Self> {
        check_bits(bit_width)?;
        if scale.is_nan() || scale.to_f64() <= 0.0 || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "elastic scale must be positive and finite, got {scale}"
            )));
        }
        if inv_scale != f16_round(1.0 / scale.to_f64()) {
            return Err(Error::InvalidArgument(format!(
                "inv_scale {inv_scale} is not the rounded reciprocal of {scale}"
            )));
        }
        Ok(ElasticParams {
            scale,
            inv_scale,
            bias,
            bit_width,
            signedness,
        })
    }

    pub fn range(&self) -> (i64, i64) {
        code_range(self.bit_width, self.signedness)
    }
}

/// BWN binarization in binary64: signs and the mean-absolute-value scale.
/// `sign(0)` is taken as +1.
pub fn bwn_binarize_exact(w: &Array2<f64>) -> Result<(SignMatrix, f64)> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("cannot binarize an empty matrix".into()));
    }
    let scale = w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
    if scale.is_nan() || scale <= 0.0 || !scale.is_finite() {
        return Err(Error::DegenerateWeight(format!(
            "mean absolute value is {scale}; binarization needs a positive scale"
        )));
    }
    let (rows, cols) = w.dim();
    let signs = SignMatrix::from_fn(rows, cols, |r, c| w[[r, c]] >= 0.0);
    Ok((signs, scale))
}

/// BWN binarization with the scale rounded for deployment.
pub fn bwn_binarize(w: &Array2<f64>) -> Result<BinWeight> {
    let (signs, scale) = bwn_binarize_exact(w)?;
    let scale = f16_round(scale);
    if scale == F16::ZERO {
        return Err(Error::DegenerateWeight(
            "scale underflows binary16".into(),
        ));
    }
    Ok(BinWeight { signs, scale })
}

/// Front half of the quantization unit: bias add, multiply by the stored
/// reciprocal, then float-to-integer conversion saturating to 16-bit signed.
pub fn elastic_prescale(x: F16, p: &ElasticParams) -> i16 {
    let t = x + p.bias;
    let u = t * p.inv_scale;
    u.round_ties_even_i64()
        .clamp(i16::MIN as i64, i16::MAX as i64) as i16
}

/// One element of elastic quantization using an arithmetic clamp.
pub fn elastic_code(x: F16, p: &ElasticParams) -> i32 {
    let (lo, hi) = p.range();
    (elastic_prescale(x, p) as i64).clamp(lo, hi) as i32
}

pub fn elastic_quantize(x: &Array2<F16>, p: &ElasticParams) -> QTensor {
    let codes = x.mapv(|v| elastic_code(v, p));
    QTensor::new(codes, p.bit_width, p.signedness, p.scale, p.bias)
        .expect("codes are clamped into range and params are validated")
}

/// Dequantized value of a single code, `f16(scale * code)`.
pub fn dequantize_code(code: i64, scale: F16) -> F16 {
    f16_round(code as f64 * scale.to_f64())
}

pub fn dequantize(q: &QTensor) -> Array2<F16> {
    let scale = q.scale();
    q.codes().mapv(|c| dequantize_code(c as i64, scale))
}

/// Dequantize an integer QMM accumulator with a combined (activation x
/// weight) scale. The product is formed exactly and rounded once.
pub fn dequantize_accumulator(acc: i64, combined_scale: F16) -> F16 {
    // |acc| < 2^40 and the scale carries 11 significant bits, so the binary64
    // product is exact.
    f16_round(acc as f64 * combined_scale.to_f64())
}

/// Bit-level clip of a 16-bit signed fixed-point value to an `out_bits`-wide
/// code, as wired in the quantization unit: compare the high bits, pass the
/// low bits through when they agree, otherwise saturate by the sign bit.
///
/// `out_bits` must be in `1..16`.
pub fn clip_unit(x: i16, out_bits: u32, signedness: Signedness) -> i32 {
    debug_assert!((1..16).contains(&out_bits));
    let raw = x as u16;
    let sign = raw >> 15;
    match signedness {
        Signedness::Signed => {
            // Bits [15 : N-1] must all equal the sign bit.
            let high = raw >> (out_bits - 1);
            let ones = (1u32 << (17 - out_bits)) - 1;
            if high == 0 || high as u32 == ones {
                let shift = 16 - out_bits;
                (((raw << shift) as i16) >> shift) as i32
            } else if sign == 0 {
                (1 << (out_bits - 1)) - 1
            } else {
                -(1 << (out_bits - 1))
            }
        }
        Signedness::Unsigned => {
            // Bits [15 : N] must all be zero.
            if raw >> out_bits == 0 {
                (raw & ((1u16 << out_bits) - 1)) as i32
            } else if sign == 0 {
                (1 << out_bits) - 1
            } else {
                0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn h(x: f64) -> F16 {
        f16_round(x)
    }

    #[test]
    fn bwn_examples() {
        let (signs, scale) = bwn_binarize_exact(&array![[0.5, -1.5], [1.0, -1.0]]).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(signs.to_i32(), array![[1, -1], [1, -1]]);

        let (signs, scale) = bwn_binarize_exact(&array![[0.37]]).unwrap();
        assert_eq!(scale, 0.37);
        assert_eq!(signs.sign(0, 0), 1);

        let w = bwn_binarize(&array![[1.0, -1.0]]).unwrap();
        assert_eq!(w.scale, F16::ONE);
        assert_eq!(w.dequantize(), array![[F16::ONE, -F16::ONE]]);
    }

    #[test]
    fn bwn_sign_of_zero_is_positive() {
        let (signs, _) = bwn_binarize_exact(&array![[0.0, -2.0]]).unwrap();
        assert_eq!(signs.sign(0, 0), 1);
    }

    #[test]
    fn bwn_degenerate() {
        assert!(matches!(
            bwn_binarize_exact(&array![[0.0, 0.0]]),
            Err(Error::DegenerateWeight(_))
        ));
        assert!(bwn_binarize_exact(&Array2::<f64>::zeros((0, 3))).is_err());
    }

    #[test]
    fn bwn_scale_is_exact_mean_abs() {
        // Dyadic inputs: the mean is exact in binary64.
        let w = array![[0.25, -0.75, 1.5], [-2.0, 0.5, 0.0]];
        let (_, scale) = bwn_binarize_exact(&w).unwrap();
        assert_eq!(scale, 5.0 / 6.0);
    }

    #[test]
    fn elastic_examples() {
        let p = ElasticParams::new(h(0.25), h(0.02), 4, Signedness::Signed).unwrap();
        assert_eq!(elastic_code(h(0.53), &p), 2);
        let q = elastic_quantize(&array![[h(0.53)]], &p);
        assert_eq!(dequantize(&q)[[0, 0]], h(0.5));

        let p = ElasticParams::new(F16::ONE, F16::ZERO, 8, Signedness::Signed).unwrap();
        assert_eq!(elastic_code(h(300.0), &p), 127);
        assert_eq!(elastic_code(h(-300.0), &p), -128);
        assert_eq!(elastic_code(F16::ZERO, &p), 0);
    }

    #[test]
    fn inv_scale_is_validated() {
        assert!(ElasticParams::with_inv_scale(h(0.3), h(3.0), F16::ZERO, 4, Signedness::Signed).is_err());
        let p = ElasticParams::new(h(0.3), F16::ZERO, 4, Signedness::Signed).unwrap();
        assert_eq!(p.inv_scale, h(1.0 / h(0.3).to_f64()));
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize_code(2, h(0.25)), h(0.5));
        assert_eq!(dequantize_code(-8, F16::ONE), h(-8.0));
    }

    #[test]
    fn clip_unit_examples() {
        assert_eq!(clip_unit(15, 4, Signedness::Signed), 7);
        assert_eq!(clip_unit(-8, 4, Signedness::Signed), -8);
        assert_eq!(clip_unit(7, 4, Signedness::Signed), 7);
        assert_eq!(clip_unit(-9, 4, Signedness::Signed), -8);
        assert_eq!(clip_unit(-3, 4, Signedness::Unsigned), 0);
        assert_eq!(clip_unit(16, 4, Signedness::Unsigned), 15);
        assert_eq!(clip_unit(0, 1, Signedness::Signed), 0);
        assert_eq!(clip_unit(1, 1, Signedness::Signed), 0);
        assert_eq!(clip_unit(-5, 1, Signedness::Signed), -1);
    }

    #[test]
    fn clip_unit_matches_arithmetic_clip_exhaustively() {
        for bits in 1..16u32 {
            for s in [Signedness::Signed, Signedness::Unsigned] {
                let (lo, hi) = code_range(bits, s);
                for raw in i16::MIN..=i16::MAX {
                    let want = (raw as i64).clamp(lo, hi) as i32;
                    assert_eq!(clip_unit(raw, bits, s), want, "x={raw} N={bits} {s:?}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn elastic_codes_in_range(
            x in -70000.0f64..70000.0,
            scale in 0.001f64..64.0,
            bias in -4.0f64..4.0,
            bits_idx in 0usize..5,
            signed in any::<bool>(),
        ) {
            let bits = crate::tensor::SUPPORTED_BITS[bits_idx];
            let s = if signed { Signedness::Signed } else { Signedness::Unsigned };
            let p = ElasticParams::new(h(scale), h(bias), bits, s).unwrap();
            let (lo, hi) = p.range();
            let c = elastic_code(h(x), &p) as i64;
            prop_assert!(c >= lo && c <= hi);
        }

        #[test]
        fn dequantize_round_trip(
            scale in 0.001f64..4.0,
            bits_idx in 0usize..4,
            signed in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let bits = [1u32, 2, 4, 8][bits_idx];
            let s = if signed { Signedness::Signed } else { Signedness::Unsigned };
            let p = ElasticParams::new(h(scale), F16::ZERO, bits, s).unwrap();
            let (lo, hi) = p.range();
            let mut rng = crate::rng::Rng::new(seed);
            let codes = Array2::from_shape_fn((3, 5), |_| rng.int_range(lo, hi) as i32);
            let q = QTensor::new(codes, bits, s, p.scale, F16::ZERO).unwrap();
            let back = elastic_quantize(&dequantize(&q), &p);
            prop_assert_eq!(back.codes(), q.codes());
        }
    }
}
