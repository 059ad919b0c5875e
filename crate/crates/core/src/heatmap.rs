//! Overlay of selected query locations, warm for low entropy and cool for high.

use image::{Rgb, RgbImage};
use qsattn_tensor::{Scalar, Tensor};

use crate::attn::SelectionResult;
use crate::data::tensor_to_rgb;
use crate::error::{QsError, Result};

const OPACITY: f32 = 0.65;

/// Color for position `t ∈ [0, 1]` along red → yellow → cyan → blue.
pub fn ramp(t: f32) -> [u8; 3] {
    let stops = [[255.0, 0.0, 0.0], [255.0, 220.0, 0.0], [0.0, 220.0, 255.0], [0.0, 40.0, 255.0]];
    let x = t.clamp(0.0, 1.0) * (stops.len() - 1) as f32;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let f = x - i as f32;
    std::array::from_fn(|k| (stops[i][k] * (1.0 - f) + stops[i + 1][k] * f).round() as u8)
}

/// Draws every selected location of a `tap_side×tap_side` map as a block on the image.
pub fn render_selection<T: Scalar>(image: &Tensor<f32>, sel: &SelectionResult<T>, tap_side: usize) -> Result<RgbImage> {
    let mut img = tensor_to_rgb(image)?;
    let (w, h) = img.dimensions();
    if tap_side == 0 || !(w as usize).is_multiple_of(tap_side) || !(h as usize).is_multiple_of(tap_side) {
        return Err(QsError::config(format!("{w}×{h} image does not tile into a {tap_side}×{tap_side} map")));
    }
    let (fx, fy) = (w as usize / tap_side, h as usize / tap_side);
    let scores: Vec<f64> = sel.scores.iter().map(|s| s.as_f64()).collect();
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (&idx, &s) in sel.indices.iter().zip(&scores) {
        let t = if hi > lo { ((s - lo) / (hi - lo)) as f32 } else { 0.0 };
        let color = ramp(t);
        let (r, c) = (idx / tap_side, idx % tap_side);
        for y in r * fy..(r + 1) * fy {
            for x in c * fx..(c + 1) * fx {
                let p = img.get_pixel(x as u32, y as u32).0;
                let mixed = std::array::from_fn(|k| {
                    (p[k] as f32 * (1.0 - OPACITY) + color[k] as f32 * OPACITY).round() as u8
                });
                img.put_pixel(x as u32, y as u32, Rgb(mixed));
            }
        }
    }
    Ok(img)
}
