//! Emulated half precision.

use super::{DType, Tensor};

const F16_MIN_NORMAL: f32 = 6.103_515_6e-5; // 2^-14
const F16_OVERFLOW: f32 = 65_520.0; // halfway between 65504 and 2^16

/// Rounds an f32 to the nearest IEEE binary16 value (ties to even) and
/// returns it widened back to f32.
///
/// Branch-free so that slice rounding vectorizes.
#[inline]
pub fn round_to_f16(x: f32) -> f32 {
    let a = x.abs();
    // Normal range: round the mantissa to 10 bits. NaN payloads keep their
    // all-ones exponent and stay NaN.
    let bits = a.to_bits();
    let lsb = (bits >> 13) & 1;
    let normal = f32::from_bits((bits + 0x0FFF + lsb) & !0x1FFF);
    // Subnormal range: every f32 in [0.5, 1) has spacing 2^-24, exactly the
    // f16 subnormal spacing, so the addition does the rounding.
    let subnormal = (a + 0.5) - 0.5;
    let r = if a < F16_MIN_NORMAL { subnormal } else { normal };
    let r = if a >= F16_OVERFLOW { f32::INFINITY } else { r };
    r.copysign(x)
}

/// Rounds in place; returns whether every rounded value is finite.
pub(crate) fn round_slice_to_f16(values: &mut [f32]) -> bool {
    // An integer or-reduction keeps the loop vectorizable.
    let mut exp_all_ones = 0u32;
    for v in values {
        *v = round_to_f16(*v);
        exp_all_ones |= u32::from(v.to_bits() & 0x7F80_0000 == 0x7F80_0000);
    }
    exp_all_ones == 0
}

/// Converts a tensor to `target` precision.
///
/// Casting to f16 rounds every value to nearest-even; casting to f32 keeps the
/// values (every f16 is exactly representable in f32).
pub fn cast_precision(t: &Tensor, target: DType) -> Tensor {
    let mut out = t.clone();
    if target == DType::F16 && t.dtype() != DType::F16 {
        let _ = round_slice_to_f16(out.data_mut());
    }
    out.set_dtype(target);
    out
}
