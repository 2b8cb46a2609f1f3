use batforge_core::{Rng, F16};
use half::f16;

fn same(ours: F16, theirs: f16) -> bool {
    if theirs.is_nan() {
        ours.is_nan()
    } else {
        ours.to_bits() == theirs.to_bits()
    }
}

/// Mostly finite operands with a sprinkling of special encodings.
fn operand(rng: &mut Rng) -> u16 {
    match rng.index(16) {
        0 => [0x0000, 0x8000, 0x7c00, 0xfc00, 0x0001, 0x8001, 0x03ff, 0x7bff][rng.index(8)],
        1 => rng.index(0x0400) as u16 | if rng.coin() { 0x8000 } else { 0 },
        _ => rng.next_u64() as u16 & 0xfbff | ((rng.index(31) as u16) << 10) & 0x7c00,
    }
}

#[test]
fn arithmetic_matches_half_on_a_million_pairs() {
    let mut rng = Rng::new(0x1e6);
    let mut mismatches = Vec::new();
    for _ in 0..1_000_000 {
        let (a, b) = (operand(&mut rng), operand(&mut rng));
        let (x, y) = (F16::from_bits(a), F16::from_bits(b));
        let (hx, hy) = (f16::from_bits(a), f16::from_bits(b));
        let cases = [
            ("add", x + y, hx + hy),
            ("sub", x - y, hx - hy),
            ("mul", x * y, hx * hy),
            ("div", x / y, hx / hy),
        ];
        for (op, ours, theirs) in cases {
            if !same(ours, theirs) {
                mismatches.push(format!("{a:#06x} {op} {b:#06x}: {:#06x} vs {:#06x}", ours.to_bits(), theirs.to_bits()));
            }
        }
    }
    assert!(mismatches.is_empty(), "{} mismatches, first: {:?}", mismatches.len(), &mismatches[..mismatches.len().min(5)]);
}

#[test]
fn conversions_match_half() {
    for bits in 0..=u16::MAX {
        let ours = F16::from_bits(bits);
        let theirs = f16::from_bits(bits);
        let (a, b) = (ours.to_f64(), theirs.to_f64());
        assert!(a == b || (a.is_nan() && b.is_nan()), "{bits:#06x}");
    }
    let mut rng = Rng::new(3);
    for _ in 0..1_000_000 {
        let v = random_f64(&mut rng) as f32;
        assert!(same(F16::from_f32(v), f16::from_f32(v)), "{v:e}");
    }
}

/// Random significand, exponent spanning the subnormal to overflow range.
fn random_f64(rng: &mut Rng) -> f64 {
    let m = f64::from_bits(rng.next_u64() & 0x000f_ffff_ffff_ffff | 0x3ff0_0000_0000_0000);
    let v = m * 2f64.powi(rng.int_range(-27, 16) as i32);
    if rng.coin() {
        v
    } else {
        -v
    }
}

/// `half` narrows binary64 through binary32 and so rounds twice near
/// midpoints; binary64 input is checked against the exact nearest value.
#[test]
fn from_f64_is_nearest_ties_even() {
    let mut rng = Rng::new(4);
    for _ in 0..1_000_000 {
        let v = random_f64(&mut rng);
        let ours = F16::from_f64(v);
        let o = ours.to_f64();
        if ours.is_infinite() {
            assert!(v.abs() >= 65520.0, "{v:e}");
            continue;
        }
        let mag = ours.to_bits() & 0x7fff;
        let sign = ours.to_bits() & 0x8000;
        for n in [mag.checked_sub(1), Some(mag + 1)].into_iter().flatten() {
            let n = F16::from_bits(sign | n);
            if !n.is_finite() {
                continue;
            }
            let (d_ours, d_n) = ((v - o).abs(), (v - n.to_f64()).abs());
            assert!(d_ours <= d_n, "{v:e}: {o:e} vs neighbour {:e}", n.to_f64());
            if d_ours == d_n {
                assert_eq!(mag & 1, 0, "{v:e}: tie not to even");
            }
        }
    }
    // A value just below a midpoint, which double rounding pushes up.
    assert_eq!(F16::from_f64(-1.2431144290675081e-3).to_bits(), 0x9517);
    assert_eq!(f16::from_f64(-1.2431144290675081e-3).to_bits(), 0x9518);
}
