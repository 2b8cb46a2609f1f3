//! Bit-level models of the QMM arithmetic: operand decoder, the bit-serial
//! PE with sign bit elimination, the 4:2 compressor tree and the DPU.

use crate::error::{Error, Result};
use crate::tensor::{code_range, Signedness};

/// Parallel operand widths the PE supports.
pub const PE_WIDTHS: [u32; 4] = [1, 2, 4, 8];

/// Number of PEs per DPU.
pub const P_PE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataConfig {
    BinaryWeight,
    SignedActivation(u32),
    UnsignedActivation(u32),
}

impl DataConfig {
    pub fn activation(bits: u32, signedness: Signedness) -> Self {
        match signedness {
            Signedness::Signed => DataConfig::SignedActivation(bits),
            Signedness::Unsigned => DataConfig::UnsignedActivation(bits),
        }
    }

    /// Cycles one operand takes to stream through a PE.
    pub fn serial_cycles(self) -> u64 {
        match self {
            DataConfig::BinaryWeight => 1,
            DataConfig::SignedActivation(n) | DataConfig::UnsignedActivation(n) => n as u64,
        }
    }

    fn range(self) -> (i64, i64) {
        match self {
            DataConfig::BinaryWeight => (0, 1),
            DataConfig::SignedActivation(n) => code_range(n, Signedness::Signed),
            DataConfig::UnsignedActivation(n) => code_range(n, Signedness::Unsigned),
        }
    }
}

/// Serial digits `y_i` in `{-1, 0, +1}`, least significant first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TernBitStream {
    pub digits: Vec<i8>,
    pub config: DataConfig,
}

impl TernBitStream {
    pub fn value(&self) -> i64 {
        self.digits
            .iter()
            .enumerate()
            .map(|(i, &d)| (d as i64) << i)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    /// 2-bit decoder encodings: +1 -> 0b01, 0 -> 0b00, -1 -> 0b11.
    pub fn encoded(&self) -> Vec<u8> {
        self.digits.iter().map(|&d| encode_digit(d)).collect()
    }
}

pub fn encode_digit(d: i8) -> u8 {
    match d {
        1 => 0b01,
        0 => 0b00,
        -1 => 0b11,
        _ => panic!("digit {d} outside the ternary alphabet"),
    }
}

/// Decode a raw operand into its serial digit stream.
///
/// For a binary weight `raw` is the sign bit (1 -> +1, 0 -> -1). Signed
/// activations stream two's-complement bits with the top digit negated.
pub fn decode_operand(raw: i64, config: DataConfig) -> Result<TernBitStream> {
    let (lo, hi) = config.range();
    if raw < lo || raw > hi {
        return Err(Error::InvalidArgument(format!(
            "operand {raw} outside [{lo}, {hi}] for {config:?}"
        )));
    }
    let digits = match config {
        DataConfig::BinaryWeight => vec![if raw == 1 { 1 } else { -1 }],
        DataConfig::UnsignedActivation(n) => (0..n).map(|i| ((raw >> i) & 1) as i8).collect(),
        DataConfig::SignedActivation(n) => {
            let bits = raw as u64;
            (0..n)
                .map(|i| {
                    let b = ((bits >> i) & 1) as i8;
                    if i == n - 1 {
                        -b
                    } else {
                        b
                    }
                })
                .collect()
        }
    };
    Ok(TernBitStream { digits, config })
}

/// Result of one bit-serial multiplication.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeResult {
    pub product: i64,
    pub cycles: u64,
}

/// Cycle-by-cycle PE model.
///
/// The adder is `W = N_x + 1` bits wide. Each partial product `p` (0, `x`,
/// or `~x` with carry-in 1 for a negative digit) is sign-extended to `W`
/// bits, then its top bit is flipped, which turns the signed operand into
/// an unsigned one offset by `2^(W-1)`. The offsets of all `N_y` cycles are
/// cancelled by loading `2^(W-1)` as the initial product and flipping the
/// top bit of the final result, so no sign extension is ever needed.
#[derive(Clone, Debug)]
pub struct PeState {
    width: u32,
    x_ext: u64,
    psum: u64,
    shift_reg: u64,
    cycle: u32,
}

impl PeState {
    pub fn new(x: i64, n_x: u32, signedness: Signedness) -> Result<Self> {
        if !PE_WIDTHS.contains(&n_x) {
            return Err(Error::UnsupportedWidth(n_x));
        }
        let (lo, hi) = code_range(n_x, signedness);
        if x < lo || x > hi {
            return Err(Error::InvalidArgument(format!(
                "x = {x} outside [{lo}, {hi}] for {n_x}-bit {signedness:?}"
            )));
        }
        let width = n_x + 1;
        let mask = (1u64 << width) - 1;
        Ok(PeState {
            width,
            x_ext: (x as u64) & mask,
            // Initial product enters through the accumulator port.
            psum: 1u64 << (width - 1),
            shift_reg: 0,
            cycle: 0,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn step(&mut self, digit: i8) {
        let w = self.width;
        let mask = (1u64 << w) - 1;
        let (pp, c_in) = match digit {
            0 => (0, 0),
            1 => (self.x_ext, 0),
            -1 => (!self.x_ext & mask, 1),
            _ => panic!("digit {digit} outside the ternary alphabet"),
        };
        let pp_sbe = pp ^ (1u64 << (w - 1));
        let sum = self.psum + pp_sbe + c_in;
        assert!(sum < 1u64 << (w + 1), "adder overflowed {} bits", w + 1);
        self.shift_reg |= (sum & 1) << self.cycle;
        self.psum = sum >> 1;
        assert!(self.psum < 1u64 << w, "psum exceeds {w} bits");
        self.cycle += 1;
    }

    pub fn finish(&self) -> i64 {
        let n = self.cycle;
        let u = (self.psum << n) | self.shift_reg;
        u as i64 - (1i64 << (self.width - 1 + n))
    }
}

pub fn pe_multiply(x: i64, n_x: u32, x_signedness: Signedness, y: &TernBitStream) -> Result<PeResult> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty digit stream".into()));
    }
    let mut pe = PeState::new(x, n_x, x_signedness)?;
    for &d in &y.digits {
        pe.step(d);
    }
    Ok(PeResult {
        product: pe.finish(),
        cycles: y.len() as u64,
    })
}

/// Stage count of a 4:2 compressor tree reducing `lanes` inputs to a
/// carry-save pair.
pub fn tree_depth(lanes: usize) -> u32 {
    let mut n = lanes;
    let mut depth = 0;
    while n > 2 {
        n = reduce_count(n);
        depth += 1;
    }
    depth
}

fn reduce_count(n: usize) -> usize {
    let rem = n % 4;
    (n / 4) * 2 + if rem == 3 { 2 } else { rem }
}

fn csa(a: i64, b: i64, c: i64) -> (i64, i64) {
    let s = a ^ b ^ c;
    let carry = ((a & b) | (a & c) | (b & c)).wrapping_shl(1);
    (s, carry)
}

fn compress_4_2(a: i64, b: i64, c: i64, d: i64) -> (i64, i64) {
    let (s1, c1) = csa(a, b, c);
    csa(s1, c1, d)
}

/// Tree sum of up to `lanes` values, returning the sum and the tree depth.
pub fn compressor_tree_sum(values: &[i64], lanes: usize) -> Result<(i64, u32)> {
    if values.len() > lanes {
        return Err(Error::InvalidArgument(format!(
            "{} values for a {lanes}-lane tree",
            values.len()
        )));
    }
    let mut level: Vec<i64> = values.to_vec();
    level.resize(lanes, 0);
    let mut depth = 0;
    while level.len() > 2 {
        let mut next = Vec::with_capacity(reduce_count(level.len()));
        let mut chunks = level.chunks_exact(4);
        for c in chunks.by_ref() {
            let (s, cy) = compress_4_2(c[0], c[1], c[2], c[3]);
            next.push(s);
            next.push(cy);
        }
        match chunks.remainder() {
            [a, b, c] => {
                let (s, cy) = csa(*a, *b, *c);
                next.push(s);
                next.push(cy);
            }
            rest => next.extend_from_slice(rest),
        }
        level = next;
        depth += 1;
    }
    // Final carry-propagate add.
    let sum = level.iter().fold(0i64, |acc, &v| acc.wrapping_add(v));
    Ok((sum, depth))
}

/// One DPU dot product: PEs in groups of `p_pe`, each group reduced by the
/// compressor tree and accumulated.
pub fn dpu_dot(
    x: &[i64],
    n_x: u32,
    x_signedness: Signedness,
    y: &[i64],
    y_config: DataConfig,
    p_pe: usize,
) -> Result<(i64, u64)> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "dot of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if p_pe == 0 {
        return Err(Error::InvalidArgument("p_pe must be positive".into()));
    }
    let mut acc = 0i64;
    let mut products = Vec::with_capacity(p_pe);
    for (xc, yc) in x.chunks(p_pe).zip(y.chunks(p_pe)) {
        products.clear();
        for (&xv, &yv) in xc.iter().zip(yc) {
            let stream = decode_operand(yv, y_config)?;
            products.push(pe_multiply(xv, n_x, x_signedness, &stream)?.product);
        }
        acc += compressor_tree_sum(&products, p_pe)?.0;
    }
    let chunks = x.len().div_ceil(p_pe) as u64;
    let cycles = chunks * y_config.serial_cycles() + tree_depth(p_pe) as u64;
    Ok((acc, cycles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decoder_examples() {
        let s = decode_operand(1, DataConfig::BinaryWeight).unwrap();
        assert_eq!(s.digits, vec![1]);
        assert_eq!(s.value(), 1);
        let s = decode_operand(0, DataConfig::BinaryWeight).unwrap();
        assert_eq!(s.digits, vec![-1]);
        assert_eq!(s.encoded(), vec![0b11]);
        let s = decode_operand(0b1010, DataConfig::UnsignedActivation(4)).unwrap();
        assert_eq!(s.digits, vec![0, 1, 0, 1]);
        assert_eq!(s.value(), 10);
        let s = decode_operand(-2, DataConfig::SignedActivation(3)).unwrap();
        assert_eq!(s.digits, vec![0, 1, -1]);
        assert_eq!(s.value(), -2);
        assert!(decode_operand(8, DataConfig::SignedActivation(4)).is_err());
    }

    #[test]
    fn decoder_values_round_trip() {
        for n in 1..=8 {
            for s in [Signedness::Signed, Signedness::Unsigned] {
                let cfg = DataConfig::activation(n, s);
                let (lo, hi) = code_range(n, s);
                for v in lo..=hi {
                    assert_eq!(decode_operand(v, cfg).unwrap().value(), v);
                }
            }
        }
    }

    #[test]
    fn pe_worked_example() {
        let y = TernBitStream {
            digits: vec![0, 1, -1],
            config: DataConfig::SignedActivation(3),
        };
        let r = pe_multiply(6, 4, Signedness::Signed, &y).unwrap();
        assert_eq!(r.product, -12);
        assert_eq!(r.cycles, 3);

        let zero = TernBitStream {
            digits: vec![0; 5],
            config: DataConfig::UnsignedActivation(5),
        };
        assert_eq!(pe_multiply(-7, 4, Signedness::Signed, &zero).unwrap().product, 0);

        let w = decode_operand(1, DataConfig::BinaryWeight).unwrap();
        let r = pe_multiply(-1, 1, Signedness::Signed, &w).unwrap();
        assert_eq!((r.product, r.cycles), (-1, 1));
    }

    #[test]
    fn pe_first_cycle_matches_trace() {
        // x = 6 on a 5-bit adder, y_0 = 0: the partial product is 00000 and
        // the flipped top bit gives 10000.
        let mut pe = PeState::new(6, 4, Signedness::Signed).unwrap();
        assert_eq!(pe.width(), 5);
        pe.step(0);
        assert_eq!(pe.cycle, 1);
        assert_eq!(pe.psum, 0b10000);
    }

    #[test]
    fn pe_rejects_bad_operands() {
        let y = decode_operand(1, DataConfig::BinaryWeight).unwrap();
        assert!(matches!(
            pe_multiply(1, 3, Signedness::Signed, &y),
            Err(Error::UnsupportedWidth(3))
        ));
        assert!(pe_multiply(8, 4, Signedness::Signed, &y).is_err());
    }

    #[test]
    fn pe_exhaustive_4bit_signed() {
        for x in -8..=7 {
            for yv in -8..=7 {
                let y = decode_operand(yv, DataConfig::SignedActivation(4)).unwrap();
                assert_eq!(pe_multiply(x, 4, Signedness::Signed, &y).unwrap().product, x * yv);
            }
        }
    }

    #[test]
    fn tree_examples() {
        assert_eq!(compressor_tree_sum(&[1, 2, 3, 4], 4).unwrap(), (10, 1));
        assert_eq!(compressor_tree_sum(&[-5], 1).unwrap(), (-5, 0));
        assert_eq!(tree_depth(64), 5);
        assert_eq!(tree_depth(3), 1);
        assert_eq!(tree_depth(2), 0);
        assert!(compressor_tree_sum(&[1, 2, 3], 2).is_err());
    }

    #[test]
    fn dpu_examples() {
        let (v, _) = dpu_dot(&[1, 2, 3], 4, Signedness::Signed, &[1, 0, 1], DataConfig::BinaryWeight, 64).unwrap();
        assert_eq!(v, 2);
        let (_, cycles) = dpu_dot(&[1, 2, 3, 4], 4, Signedness::Signed, &[1, 0, 1, 1], DataConfig::BinaryWeight, 4).unwrap();
        assert_eq!(cycles, 1 + 1);
        let (_, cycles) = dpu_dot(&[0; 100], 4, Signedness::Signed, &[0; 100], DataConfig::SignedActivation(4), 64).unwrap();
        assert_eq!(cycles, 2 * 4 + 5);
        assert!(dpu_dot(&[1], 4, Signedness::Signed, &[1, 1], DataConfig::BinaryWeight, 4).is_err());
    }

    proptest! {
        #[test]
        fn tree_matches_plain_sum(values in proptest::collection::vec(-256i64..256, 0..=64)) {
            let (s, d) = compressor_tree_sum(&values, 64).unwrap();
            prop_assert_eq!(s, values.iter().sum::<i64>());
            prop_assert_eq!(d, 5);
        }

        #[test]
        fn tree_is_permutation_invariant(
            mut values in proptest::collection::vec(any::<i32>().prop_map(|v| v as i64), 1..40),
            seed in any::<u64>(),
        ) {
            let (a, _) = compressor_tree_sum(&values, 40).unwrap();
            let mut rng = crate::rng::Rng::new(seed);
            for i in (1..values.len()).rev() {
                values.swap(i, rng.index(i + 1));
            }
            let (b, _) = compressor_tree_sum(&values, 40).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn dpu_matches_oracle_and_ignores_chunking(
            pairs in proptest::collection::vec((-8i64..8, -8i64..8), 1..120),
            p_pe in 1usize..70,
        ) {
            let x: Vec<i64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<i64> = pairs.iter().map(|p| p.1).collect();
            let want: i64 = pairs.iter().map(|(a, b)| a * b).sum();
            let cfg = DataConfig::SignedActivation(4);
            let (v, _) = dpu_dot(&x, 4, Signedness::Signed, &y, cfg, p_pe).unwrap();
            prop_assert_eq!(v, want);
            let (v64, _) = dpu_dot(&x, 4, Signedness::Signed, &y, cfg, 64).unwrap();
            prop_assert_eq!(v64, want);
        }
    }
}
