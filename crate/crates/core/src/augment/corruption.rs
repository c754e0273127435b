//! Severity-graded corruptions for the robustness benchmark.
//!
//! Parameters come from a versioned [`SeverityTable`]; the built-in table is
//! `data/severity_v1.txt`. Randomness is injected through [`NoiseSource`] so
//! tests can substitute a zero-variance stub.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::seed;

const BUILTIN_TABLE: &str = include_str!("../../data/severity_v1.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    BoxBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl Corruption {
    pub const ALL: [Corruption; 7] = [
        Corruption::GaussianNoise,
        Corruption::ShotNoise,
        Corruption::ImpulseNoise,
        Corruption::BoxBlur,
        Corruption::Brightness,
        Corruption::Contrast,
        Corruption::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::ShotNoise => "shot_noise",
            Corruption::ImpulseNoise => "impulse_noise",
            Corruption::BoxBlur => "box_blur",
            Corruption::Brightness => "brightness",
            Corruption::Contrast => "contrast",
            Corruption::Pixelate => "pixelate",
        }
    }

    /// Key of the table row that parameterizes this corruption.
    pub fn table_key(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise.sigma",
            Corruption::ShotNoise => "shot_noise.rate",
            Corruption::ImpulseNoise => "impulse_noise.amount",
            Corruption::BoxBlur => "box_blur.radius",
            Corruption::Brightness => "brightness.shift",
            Corruption::Contrast => "contrast.factor",
            Corruption::Pixelate => "pixelate.factor",
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown corruption id `{s}`")))
    }
}

pub const SEVERITIES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub corruption: Corruption,
    severity: u8,
}

impl CorruptionSpec {
    /// `severity` must lie in `1..=5`.
    pub fn new(corruption: Corruption, severity: u8) -> Result<Self> {
        if !(1..=SEVERITIES as u8).contains(&severity) {
            return Err(Error::validation(format!(
                "severity {severity} outside 1..={SEVERITIES}"
            )));
        }
        Ok(Self { corruption, severity })
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }
}

/// Parsed `key = v1 .. v5` table.
#[derive(Clone, Debug, PartialEq)]
pub struct SeverityTable {
    pub version: u32,
    entries: BTreeMap<String, [f64; SEVERITIES]>,
}

impl SeverityTable {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TABLE).expect("built-in severity table parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::config(format!("severity table line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = values`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "version" {
                version = Some(value.parse().map_err(|e| err(format!("bad version: {e}")))?);
                continue;
            }
            let values: Vec<f64> = value
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| err(format!("bad number `{v}`: {e}"))))
                .collect::<Result<_>>()?;
            let values: [f64; SEVERITIES] = values
                .try_into()
                .map_err(|v: Vec<f64>| err(format!("`{key}` has {} values, expected {SEVERITIES}", v.len())))?;
            if entries.insert(key.to_owned(), values).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        let version = version.ok_or_else(|| Error::config("severity table has no version"))?;
        for c in Corruption::ALL {
            if !entries.contains_key(c.table_key()) {
                return Err(Error::config(format!("severity table is missing `{}`", c.table_key())));
            }
        }
        Ok(Self { version, entries })
    }

    pub fn values(&self, corruption: Corruption) -> [f64; SEVERITIES] {
        self.entries[corruption.table_key()]
    }

    pub fn param(&self, spec: CorruptionSpec) -> f64 {
        self.values(spec.corruption)[spec.severity as usize - 1]
    }
}

/// Source of the random draws a corruption consumes.
pub trait NoiseSource {
    fn standard_normal(&mut self) -> f64;
    /// Uniform on `[0, 1)`.
    fn uniform(&mut self) -> f64;
    fn poisson(&mut self, mean: f64) -> f64;
}

pub struct RngNoise<R>(pub R);

impl<R: Rng> NoiseSource for RngNoise<R> {
    fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    fn uniform(&mut self) -> f64 {
        self.0.random()
    }

    fn poisson(&mut self, mean: f64) -> f64 {
        if mean <= 0.0 {
            return 0.0;
        }
        Poisson::new(mean).map(|p| p.sample(&mut self.0)).unwrap_or(mean)
    }
}

/// Zero-variance stub: normal draws are 0, Poisson draws return the mean and
/// uniform draws never select an impulse.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self) -> f64 {
        0.0
    }

    fn uniform(&mut self) -> f64 {
        1.0
    }

    fn poisson(&mut self, mean: f64) -> f64 {
        mean
    }
}

/// Applies `spec` with the built-in table and a seeded noise source.
pub fn apply_corruption(img: &Image, spec: CorruptionSpec, seed: u64) -> Result<Image> {
    let table = SeverityTable::builtin();
    let mut noise = RngNoise(seed::rng(seed));
    apply_corruption_with(img, spec, &table, &mut noise)
}

pub fn apply_corruption_with(
    img: &Image,
    spec: CorruptionSpec,
    table: &SeverityTable,
    noise: &mut dyn NoiseSource,
) -> Result<Image> {
    let p = table.param(spec);
    let data = match spec.corruption {
        Corruption::GaussianNoise => img
            .data()
            .iter()
            .map(|&v| (v as f64 + p * noise.standard_normal()) as f32)
            .collect(),
        Corruption::ShotNoise => img
            .data()
            .iter()
            .map(|&v| (noise.poisson(v as f64 * p) / p) as f32)
            .collect(),
        Corruption::ImpulseNoise => img
            .data()
            .iter()
            .map(|&v| {
                if noise.uniform() < p {
                    if noise.uniform() < 0.5 {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        Corruption::BoxBlur => box_blur(img, p),
        Corruption::Brightness => img.data().iter().map(|&v| v + p as f32).collect(),
        Corruption::Contrast => {
            let mut out = Vec::with_capacity(img.data().len());
            for c in 0..img.channels() {
                let plane = img.plane(c);
                let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
                out.extend(plane.iter().map(|&v| ((v as f64 - mean) * p + mean) as f32));
            }
            out
        }
        Corruption::Pixelate => pixelate(img, p),
    };
    Ok(img.with_data(data))
}

fn blur_kernel(radius: f64) -> Vec<f64> {
    let whole = radius.floor() as isize;
    let frac = radius - radius.floor();
    let reach = if frac > 0.0 { whole + 1 } else { whole };
    let mut k: Vec<f64> = (-reach..=reach)
        .map(|d| if d.abs() <= whole { 1.0 } else { frac })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

fn box_blur(img: &Image, radius: f64) -> Vec<f32> {
    let kernel = blur_kernel(radius);
    let reach = (kernel.len() / 2) as isize;
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        let plane = img.plane(c);
        let mut tmp = vec![0.0f64; plane.len()];
        for y in 0..h {
            for x in 0..w {
                tmp[(y * w + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let sx = (x + i as isize - reach).clamp(0, w - 1);
                        k * plane[(y * w + sx) as usize] as f64
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let sy = (y + i as isize - reach).clamp(0, h - 1);
                        k * tmp[(sy * w + x) as usize]
                    })
                    .sum();
                out.push(v as f32);
            }
        }
    }
    out
}

fn pixelate(img: &Image, factor: f64) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let sh = ((h as f64 * factor).round() as usize).clamp(1, h);
    let sw = ((w as f64 * factor).round() as usize).clamp(1, w);
    let mut out = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        let plane = img.plane(c);
        let mut small = vec![0.0f64; sh * sw];
        for sy in 0..sh {
            let (y0, y1) = (sy * h / sh, ((sy + 1) * h / sh).max(sy * h / sh + 1));
            for sx in 0..sw {
                let (x0, x1) = (sx * w / sw, ((sx + 1) * w / sw).max(sx * w / sw + 1));
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += plane[y * w + x] as f64;
                    }
                }
                small[sy * sw + sx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
        for y in 0..h {
            let sy = y * sh / h;
            for x in 0..w {
                out.push(small[sy * sw + x * sw / w] as f32);
            }
        }
    }
    out
}
