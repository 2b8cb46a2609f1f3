//! Integer-coded activation tensors and bit-packed sign matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::f16::F16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signedness {
    Signed,
    Unsigned,
}

impl Signedness {
    pub fn is_signed(self) -> bool {
        matches!(self, Signedness::Signed)
    }
}

/// Activation bit-widths a [`QTensor`] may carry.
pub const SUPPORTED_BITS: [u32; 5] = [1, 2, 4, 8, 16];

/// `(Q_n, Q_p)` for an `bits`-wide code.
pub fn code_range(bits: u32, signedness: Signedness) -> (i64, i64) {
    match signedness {
        Signedness::Signed => (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1),
        Signedness::Unsigned => (0, (1i64 << bits) - 1),
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::UnsupportedWidth(bits))
    }
}

/// Quantized activations. The real value represented by a code `q` is
/// `scale * q`; `bias` is the offset that was added before quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    codes: Array2<i32>,
    bit_width: u32,
    signedness: Signedness,
    scale: F16,
    bias: F16,
}

impl QTensor {
    pub fn new(
        codes: Array2<i32>,
        bit_width: u32,
        signedness: Signedness,
        scale: F16,
        bias: F16,
    ) -> Result<Self> {
        check_bits(bit_width)?;
        if scale.is_nan() || scale.to_f64() <= 0.0 || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "quantizer scale must be positive, got {scale}"
            )));
        }
        let (lo, hi) = code_range(bit_width, signedness);
        if let Some(bad) = codes.iter().find(|&&c| (c as i64) < lo || (c as i64) > hi) {
            return Err(Error::InvalidArgument(format!(
                "code {bad} outside [{lo}, {hi}] for {bit_width}-bit {signedness:?}"
            )));
        }
        Ok(QTensor {
            codes,
            bit_width,
            signedness,
            scale,
            bias,
        })
    }

    pub fn codes(&self) -> &Array2<i32> {
        &self.codes
    }

    pub fn shape(&self) -> (usize, usize) {
        self.codes.dim()
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn signedness(&self) -> Signedness {
        self.signedness
    }

    pub fn scale(&self) -> F16 {
        self.scale
    }

    pub fn bias(&self) -> F16 {
        self.bias
    }

    pub fn range(&self) -> (i64, i64) {
        code_range(self.bit_width, self.signedness)
    }
}

/// Row-major matrix of sign bits, packed LSB-first within each byte
/// (bit set means +1, clear means -1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl SignMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut positive: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = vec![0u8; (rows * cols).div_ceil(8)];
        for r in 0..rows {
            for c in 0..cols {
                if positive(r, c) {
                    let i = r * cols + c;
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
        }
        SignMatrix { rows, cols, bits }
    }

    pub fn from_packed(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        let need = (rows * cols).div_ceil(8);
        if bits.len() != need {
            return Err(Error::Format(format!(
                "sign matrix {rows}x{cols} needs {need} bytes, got {}",
                bits.len()
            )));
        }
        let m = SignMatrix { rows, cols, bits };
        let used = rows * cols;
        if !used.is_multiple_of(8) && m.bits[need - 1] >> (used % 8) != 0 {
            return Err(Error::Format("non-zero padding bits in sign matrix".into()));
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    /// Raw sign bit: 1 for +1, 0 for -1.
    pub fn bit(&self, r: usize, c: usize) -> u8 {
        let i = r * self.cols + c;
        (self.bits[i / 8] >> (i % 8)) & 1
    }

    pub fn sign(&self, r: usize, c: usize) -> i32 {
        if self.bit(r, c) == 1 {
            1
        } else {
            -1
        }
    }

    pub fn to_i32(&self) -> Array2<i32> {
        Array2::from_shape_fn((self.rows, self.cols), |(r, c)| self.sign(r, c))
    }
}

/// Binarized weight matrix `scale * signs`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinWeight {
    pub signs: SignMatrix,
    pub scale: F16,
}

impl BinWeight {
    pub fn shape(&self) -> (usize, usize) {
        (self.signs.rows(), self.signs.cols())
    }

    pub fn dequantize(&self) -> Array2<F16> {
        let neg = -self.scale;
        Array2::from_shape_fn(self.shape(), |(r, c)| {
            if self.signs.bit(r, c) == 1 {
                self.scale
            } else {
                neg
            }
        })
    }
}
