//! Sub-pixel sampling along image rows.
//!
//! Cost volumes sample with linear interpolation. The refinement stage, whose
//! sampling positions depend on learnable parameters, uses Catmull-Rom cubic
//! interpolation: it is exact at integer positions and has a continuous first
//! derivative, so gradients with respect to the position are well defined.

/// Linear interpolation of all channels of row `row` (interleaved, `width`
/// pixels) at horizontal position `pos`. Caller guarantees `0 <= pos <= width-1`.
#[inline]
pub fn linear_row(row: &[f32], width: usize, channels: usize, pos: f64, out: &mut [f32]) {
    debug_assert!(pos >= 0.0 && pos <= (width - 1) as f64);
    let i0 = (pos.floor() as usize).min(width.saturating_sub(2));
    let t = (pos - i0 as f64) as f32;
    if width == 1 {
        out.copy_from_slice(&row[..channels]);
        return;
    }
    let a = &row[i0 * channels..(i0 + 1) * channels];
    let b = &row[(i0 + 1) * channels..(i0 + 2) * channels];
    for c in 0..channels {
        out[c] = a[c] + t * (b[c] - a[c]);
    }
}

/// Catmull-Rom interpolation of all channels at `pos`, writing values and
/// their derivative with respect to `pos`. Neighbours outside the row are
/// replicated from the border.
#[inline]
pub fn cubic_row(
    row: &[f32],
    width: usize,
    channels: usize,
    pos: f64,
    value: &mut [f64],
    deriv: &mut [f64],
) {
    debug_assert!(pos >= 0.0 && pos <= (width - 1) as f64);
    if width == 1 {
        for c in 0..channels {
            value[c] = row[c] as f64;
            deriv[c] = 0.0;
        }
        return;
    }
    let i1 = (pos.floor() as usize).min(width - 2);
    let t = pos - i1 as f64;
    let i0 = i1.saturating_sub(1);
    let i2 = i1 + 1;
    let i3 = (i1 + 2).min(width - 1);
    let (t2, t3) = (t * t, t * t * t);
    for c in 0..channels {
        let p0 = row[i0 * channels + c] as f64;
        let p1 = row[i1 * channels + c] as f64;
        let p2 = row[i2 * channels + c] as f64;
        let p3 = row[i3 * channels + c] as f64;
        let a1 = -p0 + p2;
        let a2 = 2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3;
        let a3 = -p0 + 3.0 * p1 - 3.0 * p2 + p3;
        value[c] = 0.5 * (2.0 * p1 + a1 * t + a2 * t2 + a3 * t3);
        deriv[c] = 0.5 * (a1 + 2.0 * a2 * t + 3.0 * a3 * t2);
    }
}

/// True when `pos` is a valid sampling position in a row of `width` pixels.
#[inline]
pub fn in_row(pos: f64, width: usize) -> bool {
    pos >= 0.0 && pos <= (width - 1) as f64
}
