//! Pixel transform `y = ln(1 + x)` and its inverse onto photon counts.

/// Forward transform of photon counts.
pub fn log_transform(pixels: &[u16]) -> Vec<f32> {
    pixels.iter().map(|&p| (p as f32).ln_1p()).collect()
}

/// `round(max(0, e^y - 1))`, saturating at `u16::MAX`.
#[inline]
pub fn inverse_transform_value(y: f32) -> u16 {
    let x = y.exp_m1().max(0.0).round();
    if x >= u16::MAX as f32 {
        u16::MAX
    } else {
        x as u16
    }
}

pub fn inverse_transform(values: &[f32]) -> Vec<u16> {
    values.iter().map(|&y| inverse_transform_value(y)).collect()
}
