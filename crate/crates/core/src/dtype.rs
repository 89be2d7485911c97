//! Element types of stored tensors and exact conversions to and from `f64`.
//!
//! Widening is always exact. Narrowing rounds to nearest, ties to even,
//! directly from the `f64` value (no intermediate `f32` step).

use core::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::F64, DType::F32, DType::F16, DType::BF16];

    /// Bytes per element.
    pub fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        DType::ALL.into_iter().find(|d| d.name() == s)
    }

    /// Decodes one little-endian element. `bytes.len()` must equal `width()`.
    pub fn decode(self, bytes: &[u8]) -> f64 {
        match self {
            DType::F64 => f64::from_le_bytes(bytes.try_into().expect("8-byte element")),
            DType::F32 => f32::from_le_bytes(bytes.try_into().expect("4-byte element")) as f64,
            DType::F16 => f16_to_f64(u16::from_le_bytes([bytes[0], bytes[1]])),
            DType::BF16 => bf16_to_f64(u16::from_le_bytes([bytes[0], bytes[1]])),
        }
    }

    /// Encodes one element, rounding to nearest-even, into `out[..width()]`.
    pub fn encode(self, value: f64, out: &mut [u8]) {
        match self {
            DType::F64 => out[..8].copy_from_slice(&value.to_le_bytes()),
            DType::F32 => out[..4].copy_from_slice(&(value as f32).to_le_bytes()),
            DType::F16 => out[..2].copy_from_slice(&f64_to_f16(value).to_le_bytes()),
            DType::BF16 => out[..2].copy_from_slice(&f64_to_bf16(value).to_le_bytes()),
        }
    }

    /// The value this dtype would store for `value`, widened back to `f64`.
    pub fn narrow(self, value: f64) -> f64 {
        match self {
            DType::F64 => value,
            DType::F32 => value as f32 as f64,
            DType::F16 => f16_to_f64(f64_to_f16(value)),
            DType::BF16 => bf16_to_f64(f64_to_bf16(value)),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Exact power of two for exponents in the normal `f64` range.
fn pow2(exp: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&exp));
    f64::from_bits(((exp + 1023) as u64) << 52)
}

pub fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let man = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * man * pow2(-24),
        0x1f if man == 0.0 => sign * f64::INFINITY,
        0x1f => f64::NAN.copysign(sign),
        _ => sign * (1024.0 + man) * pow2(exp - 25),
    }
}

pub fn bf16_to_f64(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

pub fn f64_to_f16(value: f64) -> u16 {
    narrow_bits(value, 5, 10)
}

pub fn f64_to_bf16(value: f64) -> u16 {
    narrow_bits(value, 8, 7)
}

/// Round-to-nearest-even conversion from `f64` into a binary format with
/// `exp_bits` exponent bits and `man_bits` explicit mantissa bits.
fn narrow_bits(value: f64, exp_bits: u32, man_bits: u32) -> u16 {
    let raw = value.to_bits();
    let sign = ((raw >> 63) as u16) << (exp_bits + man_bits);
    let exp = ((raw >> 52) & 0x7ff) as i64;
    let man = raw & ((1u64 << 52) - 1);
    let exp_max = (1u64 << exp_bits) - 1;
    let inf = sign | ((exp_max as u16) << man_bits);

    if exp == 0x7ff {
        return if man == 0 {
            inf
        } else {
            inf | (1 << (man_bits - 1))
        };
    }
    if exp == 0 {
        // f64 subnormals are far below the smallest target subnormal.
        return sign;
    }

    let bias = (1i64 << (exp_bits - 1)) - 1;
    let significand = (1u64 << 52) | man;
    let target_exp = exp - 1023 + bias;
    let base_shift = 52 - man_bits as i64;

    let round = |sig: u64, shift: i64| -> u64 {
        let keep = sig >> shift;
        let rem = sig & ((1u64 << shift) - 1);
        let half = 1u64 << (shift - 1);
        if rem > half || (rem == half && keep & 1 == 1) {
            keep + 1
        } else {
            keep
        }
    };

    if target_exp >= 1 {
        let mut keep = round(significand, base_shift);
        let mut e = target_exp as u64;
        if keep == 1u64 << (man_bits + 1) {
            keep >>= 1;
            e += 1;
        }
        if e >= exp_max {
            return inf;
        }
        sign | ((e as u16) << man_bits) | (keep as u16 & ((1u16 << man_bits) - 1))
    } else {
        let shift = base_shift + (1 - target_exp);
        if shift >= 54 {
            return sign;
        }
        // A carry into bit `man_bits` lands on the smallest normal encoding.
        sign | round(significand, shift) as u16
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bf16_one() {
        let mut buf = [0u8; 2];
        DType::BF16.encode(1.0, &mut buf);
        assert_eq!(u16::from_le_bytes(buf), 0x3f80);
        assert_eq!(DType::BF16.decode(&buf), 1.0);
    }

    #[test]
    fn f16_nearest_to_one_tenth() {
        // 0x2E66: exponent 11, mantissa 614 -> 1638 / 16384.
        let bits = f64_to_f16(0.1);
        assert_eq!(bits, 0x2e66);
        assert_eq!(f16_to_f64(bits), 1638.0 / 16384.0);
        assert_eq!(f16_to_f64(bits), 0.0999755859375);
    }

    #[test]
    fn negative_zero_keeps_sign() {
        for dt in DType::ALL {
            let mut buf = [0u8; 8];
            dt.encode(-0.0, &mut buf);
            let back = dt.decode(&buf[..dt.width()]);
            assert_eq!(back, 0.0);
            assert!(back.is_sign_negative(), "{dt}");
        }
    }

    #[test]
    fn ties_round_to_even() {
        // 1 + 2^-11 sits halfway between 1 and the next f16 (1 + 2^-10).
        assert_eq!(f64_to_f16(1.0 + pow2(-11)), 0x3c00);
        // 1 + 3*2^-11 is halfway between odd 1+2^-10 and even 1+2^-9.
        assert_eq!(f64_to_f16(1.0 + 3.0 * pow2(-11)), 0x3c02);
        // Just above the tie rounds up.
        assert_eq!(f64_to_f16(1.0 + pow2(-11) + pow2(-40)), 0x3c01);
        // bf16: 1 + 2^-8 is the tie between 1 and 1 + 2^-7.
        assert_eq!(f64_to_bf16(1.0 + pow2(-8)), 0x3f80);
        assert_eq!(f64_to_bf16(1.0 + pow2(-8) + pow2(-45)), 0x3f81);
    }

    #[test]
    fn no_double_rounding_through_f32() {
        // Rounds up in f64 -> f16 directly, but f32 first would land on the tie.
        let x = 1.0 + pow2(-11) + pow2(-30);
        assert_eq!(f64_to_f16(x), 0x3c01);
    }

    #[test]
    fn overflow_and_subnormals() {
        assert_eq!(f64_to_f16(65504.0), 0x7bff);
        assert_eq!(f64_to_f16(65520.0), 0x7c00);
        assert_eq!(f64_to_f16(1e300), 0x7c00);
        assert_eq!(f64_to_f16(-f64::INFINITY), 0xfc00);
        assert!(f16_to_f64(f64_to_f16(f64::NAN)).is_nan());
        assert_eq!(f64_to_f16(pow2(-24)), 0x0001);
        assert_eq!(f64_to_f16(pow2(-25)), 0x0000);
        assert_eq!(f64_to_f16(pow2(-25) * 1.5), 0x0001);
        assert_eq!(f64_to_f16(pow2(-14) * (1.0 - pow2(-12))), 0x0400);
        assert_eq!(f64_to_f16(1e-300), 0);
        assert_eq!(f64_to_bf16(f64::MAX), 0x7f80);
    }

    proptest! {
        #[test]
        fn f16_widen_then_narrow_is_identity(bits in any::<u16>()) {
            let v = f16_to_f64(bits);
            prop_assume!(!v.is_nan());
            prop_assert_eq!(f64_to_f16(v), bits);
        }

        #[test]
        fn bf16_widen_then_narrow_is_identity(bits in any::<u16>()) {
            let v = bf16_to_f64(bits);
            prop_assume!(!v.is_nan());
            prop_assert_eq!(f64_to_bf16(v), bits);
        }

        #[test]
        fn f16_narrowing_picks_a_nearest_neighbour(x in -70000.0f64..70000.0) {
            let bits = f64_to_f16(x);
            let y = f16_to_f64(bits);
            if y.is_finite() {
                let up = f16_to_f64(bits.wrapping_add(1));
                let down = f16_to_f64(bits.wrapping_sub(1));
                prop_assert!((x - y).abs() <= (x - up).abs() || up.is_nan());
                prop_assert!((x - y).abs() <= (x - down).abs() || down.is_nan());
            }
        }
    }
}
