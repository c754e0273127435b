//! Diamond-square plasma fractal blended into an image.
//!
//! The field lives on a `(2^n + 1)`-sided grid covering the image. Corners
//! are drawn from `U(-1, 1)`; at subdivision level `l = 1..=n` every new
//! point is the mean of its existing neighbours plus `U(-d_l, d_l)` with
//! `d_l = roughness^l`. Draws happen in row-major order, diamond step first.
//! The field is min-max normalized to `[0, 1]` and cropped to the image.

use rand::Rng;

use super::Image;
use crate::error::{Error, Result};
use crate::seed;

/// Smallest `n` with `2^n + 1 >= side`.
pub fn levels_for(side: usize) -> u32 {
    let mut n = 0;
    while (1usize << n) + 1 < side {
        n += 1;
    }
    n
}

/// Raw (unnormalized) diamond-square field with `2^levels + 1` samples per
/// side, row-major.
pub fn diamond_square<R: Rng + ?Sized>(levels: u32, roughness: f64, rng: &mut R) -> Vec<f64> {
    let side = (1usize << levels) + 1;
    let mut grid = vec![0.0f64; side * side];
    let last = side - 1;
    for (y, x) in [(0, 0), (0, last), (last, 0), (last, last)] {
        grid[y * side + x] = rng.random_range(-1.0..1.0);
    }
    let mut step = last;
    let mut level = 1;
    while step > 1 {
        let half = step / 2;
        let d = roughness.powi(level);
        let jitter = |rng: &mut R| if d > 0.0 { rng.random_range(-d..d) } else { 0.0 };

        // Diamond: centres of each square.
        for y in (half..side).step_by(step) {
            for x in (half..side).step_by(step) {
                let corners = grid[(y - half) * side + x - half]
                    + grid[(y - half) * side + x + half]
                    + grid[(y + half) * side + x - half]
                    + grid[(y + half) * side + x + half];
                grid[y * side + x] = corners / 4.0 + jitter(rng);
            }
        }

        // Square: edge midpoints, averaging the neighbours that exist.
        for y in (0..side).step_by(half) {
            let start = if (y / half).is_multiple_of(2) { half } else { 0 };
            for x in (start..side).step_by(step) {
                let mut sum = 0.0;
                let mut count = 0.0;
                if y >= half {
                    sum += grid[(y - half) * side + x];
                    count += 1.0;
                }
                if y + half < side {
                    sum += grid[(y + half) * side + x];
                    count += 1.0;
                }
                if x >= half {
                    sum += grid[y * side + x - half];
                    count += 1.0;
                }
                if x + half < side {
                    sum += grid[y * side + x + half];
                    count += 1.0;
                }
                grid[y * side + x] = sum / count + jitter(rng);
            }
        }

        step = half;
        level += 1;
    }
    grid
}

/// Min-max normalizes into `[0, 1]`; a constant field maps to 0.5.
pub fn normalize(field: &mut [f64]) {
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in field.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
}

/// Normalized plasma field covering `height x width`.
pub fn plasma_field(height: usize, width: usize, roughness: f64, seed: u64) -> Vec<f32> {
    let levels = levels_for(height.max(width));
    let side = (1usize << levels) + 1;
    let mut rng = seed::rng(seed);
    let mut grid = diamond_square(levels, roughness, &mut rng);
    normalize(&mut grid);
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        out.extend(grid[y * side..y * side + width].iter().map(|&v| v as f32));
    }
    out
}

/// `clamp((1 - alpha) * img + alpha * F)` with the same field on every
/// channel. `roughness` in `(0, 1]`, `alpha` in `[0, 1]`.
pub fn apply_plasma(img: &Image, roughness: f64, alpha: f64, seed: u64) -> Result<Image> {
    if !(roughness > 0.0 && roughness <= 1.0) {
        return Err(Error::validation(format!(
            "plasma roughness {roughness} outside (0, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(format!("plasma alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(img.clone());
    }
    let field = plasma_field(img.height(), img.width(), roughness, seed);
    let a = alpha as f32;
    let mut data = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        data.extend(img.plane(c).iter().zip(&field).map(|(&p, &f)| (1.0 - a) * p + a * f));
    }
    Ok(img.with_data(data))
}
