//! Blackbody white-point jitter.
//!
//! The chromaticity of a blackbody at temperature `T` comes from the cubic
//! Planckian-locus approximation of Kim et al. (valid 1667 K - 25000 K). It
//! is lifted to XYZ at unit luminance and converted to linear sRGB. Gains
//! are taken relative to the 6500 K point and rescaled so the green gain is
//! one; at 6500 K the image is therefore returned unchanged.

use super::Image;
use crate::error::{Error, Result};

pub const TEMPERATURE_RANGE: (f64, f64) = (3000.0, 15000.0);

/// Temperature whose gains are exactly `(1, 1, 1)`.
pub const NEUTRAL_TEMPERATURE: f64 = 6500.0;

const XYZ_TO_LINEAR_SRGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

/// CIE 1931 `(x, y)` chromaticity on the Planckian locus.
pub fn locus_xy(t: f64) -> (f64, f64) {
    let (t2, t3) = (t * t, t * t * t);
    let x = if t <= 4000.0 {
        -0.2661239e9 / t3 - 0.2343589e6 / t2 + 0.8776956e3 / t + 0.179910
    } else {
        -3.0258469e9 / t3 + 2.1070379e6 / t2 + 0.2226347e3 / t + 0.240390
    };
    let (x2, x3) = (x * x, x * x * x);
    let y = if t <= 2222.0 {
        -1.1063814 * x3 - 1.34811020 * x2 + 2.18555832 * x - 0.20219683
    } else if t <= 4000.0 {
        -0.9549476 * x3 - 1.37418593 * x2 + 2.09137015 * x - 0.16748867
    } else {
        3.0817580 * x3 - 5.87338670 * x2 + 3.75112997 * x - 0.37001483
    };
    (x, y)
}

fn linear_rgb(t: f64) -> [f64; 3] {
    let (x, y) = locus_xy(t);
    let xyz = [x / y, 1.0, (1.0 - x - y) / y];
    XYZ_TO_LINEAR_SRGB.map(|row| row.iter().zip(&xyz).map(|(m, v)| m * v).sum())
}

/// Per-channel `(r, g, b)` gains with `g = 1`.
pub fn gains(temperature: f64) -> [f64; 3] {
    let rgb = linear_rgb(temperature);
    let reference = linear_rgb(NEUTRAL_TEMPERATURE);
    let rel = [rgb[0] / reference[0], rgb[1] / reference[1], rgb[2] / reference[2]];
    [rel[0] / rel[1], 1.0, rel[2] / rel[1]]
}

/// Multiplies the channels of an RGB image by [`gains`] and clamps.
pub fn apply_planckian_jitter(img: &Image, temperature: f64) -> Result<Image> {
    let (lo, hi) = TEMPERATURE_RANGE;
    if !(lo..=hi).contains(&temperature) {
        return Err(Error::validation(format!(
            "temperature {temperature} K outside [{lo}, {hi}]"
        )));
    }
    if img.channels() != 3 {
        return Err(Error::validation(format!(
            "planckian jitter needs an RGB image, got {} channels",
            img.channels()
        )));
    }
    let g = gains(temperature).map(|v| v as f32);
    let mut data = Vec::with_capacity(img.data().len());
    for (c, gain) in g.iter().enumerate() {
        data.extend(img.plane(c).iter().map(|&v| v * gain));
    }
    Ok(img.with_data(data))
}
