//! Half-precision (IEEE 754 binary16) rounding, stored widened as `f32`.
//!
//! Checkpoint weights are kept in the 16-bit format to get the 2-bytes-per
//! element accounting right; arithmetic happens on the widened value.

/// Rounds `x` to the nearest binary16 value (ties to even) and returns the
/// raw 16-bit encoding.
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let mantissa = bits & 0x007F_FFFF;

    if exp == 0xFF {
        // Inf / NaN; preserve a quiet NaN payload bit.
        let nan = if mantissa != 0 { 0x0200 } else { 0 };
        return sign | 0x7C00 | nan;
    }

    // Unbiased exponent for binary16 is e - 127 + 15.
    let unbiased = exp - 127;
    if unbiased >= 16 {
        // Overflow to infinity. Values >= 65520 round up past f16::MAX.
        return sign | 0x7C00;
    }
    if unbiased >= -14 {
        // Normal range: keep 10 mantissa bits, round to nearest even on the
        // 13 dropped bits.
        let exp16 = (unbiased + 15) as u16;
        let mant16 = (mantissa >> 13) as u16;
        let round_bits = mantissa & 0x1FFF;
        let mut out = sign | (exp16 << 10) | mant16;
        if round_bits > 0x1000 || (round_bits == 0x1000 && (mant16 & 1) == 1) {
            out = out.wrapping_add(1); // carries into the exponent correctly
        }
        return out;
    }
    if unbiased >= -25 {
        // Subnormal result: shift in the implicit leading one. The target is
        // mant16 * 2^-24, so the 24-bit significand shifts by -(unbiased + 1).
        let full = mantissa | 0x0080_0000;
        let shift = (-(unbiased + 1)) as u32;
        let mant16 = (full >> shift) as u16;
        let round_mask = (1u32 << shift) - 1;
        let round_bits = full & round_mask;
        let half = 1u32 << (shift - 1);
        let mut out = sign | mant16;
        if round_bits > half || (round_bits == half && (mant16 & 1) == 1) {
            out = out.wrapping_add(1);
        }
        return out;
    }
    // Underflow to signed zero.
    sign
}

/// Widens a raw binary16 encoding back to `f32` exactly.
pub fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1F) as u32;
    let mant = (h & 0x03FF) as u32;
    let bits = match (exp, mant) {
        (0, 0) => sign,
        (0, m) => {
            // Subnormal (value = m * 2^-24): normalize into the f32 range.
            let p = 31 - m.leading_zeros(); // top bit position, 0..=9
            let exp32 = p + 103; // (p - 24) + 127
            let mant32 = (m << (23 - p)) & 0x007F_FFFF;
            sign | (exp32 << 23) | mant32
        }
        (0x1F, 0) => sign | 0x7F80_0000,
        (0x1F, m) => sign | 0x7F80_0000 | (m << 13),
        (e, m) => sign | ((e + 127 - 15) << 23) | (m << 13),
    };
    f32::from_bits(bits)
}

/// Round-trips `x` through binary16, i.e. the value a half-precision weight
/// register would hold.
pub fn round_f16(x: f32) -> f32 {
    f16_bits_to_f32(f32_to_f16_bits(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values_survive() {
        for &x in &[0.0f32, -0.0, 1.0, -1.0, 0.5, 2.0, 65504.0, -65504.0] {
            assert_eq!(round_f16(x), x, "{x} should be representable");
        }
        assert_eq!(f32_to_f16_bits(1.0), 0x3C00);
        assert_eq!(f32_to_f16_bits(-2.0), 0xC000);
        assert_eq!(f32_to_f16_bits(65504.0), 0x7BFF);
    }

    #[test]
    fn rounding_ties_to_even() {
        // 1.0 + 2^-11 is exactly halfway between 1.0 and the next f16; even
        // mantissa wins.
        let halfway = 1.0f32 + f32::powi(2.0, -11);
        assert_eq!(round_f16(halfway), 1.0);
        // 1.0 + 3 * 2^-11 is halfway with an odd lower mantissa; rounds up.
        let halfway_odd = 1.0f32 + 3.0 * f32::powi(2.0, -11);
        assert_eq!(round_f16(halfway_odd), 1.0 + 4.0 * f32::powi(2.0, -11));
    }

    #[test]
    fn overflow_and_underflow() {
        assert_eq!(round_f16(1.0e9), f32::INFINITY);
        assert_eq!(round_f16(-1.0e9), f32::NEG_INFINITY);
        assert_eq!(round_f16(1.0e-12), 0.0);
        assert!(round_f16(-1.0e-12).to_bits() == (-0.0f32).to_bits());
        // Smallest positive subnormal: 2^-24.
        let tiny = f32::powi(2.0, -24);
        assert_eq!(round_f16(tiny), tiny);
        assert_eq!(f32_to_f16_bits(tiny), 0x0001);
    }

    #[test]
    fn subnormal_roundtrip() {
        for bits in 1u16..0x0400 {
            let widened = f16_bits_to_f32(bits);
            assert_eq!(f32_to_f16_bits(widened), bits);
        }
    }

    #[test]
    fn all_finite_f16_roundtrip() {
        for bits in 0u16..=0xFFFF {
            let exp = (bits >> 10) & 0x1F;
            if exp == 0x1F {
                continue;
            }
            let widened = f16_bits_to_f32(bits);
            assert_eq!(f32_to_f16_bits(widened), bits, "bits {bits:#06x}");
        }
    }

    #[test]
    fn error_bounded_by_half_ulp() {
        let mut worst: f32 = 0.0;
        for i in 0..10_000 {
            let x = (i as f32 - 5000.0) * 0.0317;
            let r = round_f16(x);
            let ulp = {
                let mag = x.abs().max(f32::powi(2.0, -14));
                f32::powi(2.0, mag.log2().floor() as i32 - 10)
            };
            worst = worst.max((r - x).abs() / ulp);
        }
        assert!(worst <= 0.5 + 1e-6, "worst half-ulp ratio {worst}");
    }
}
