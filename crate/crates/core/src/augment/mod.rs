//! Label-preserving image operations: the three training augmentations,
//! flip/crop preprocessing, and the severity-graded corruption suite.
//!
//! Every operation maps an [`Image`] with values in `[0, 1]` to a fresh
//! image in `[0, 1]`; labels are never touched here.

pub mod corruption;
pub mod planckian;
pub mod plasma;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub use corruption::{apply_corruption, Corruption, CorruptionSpec, NoiseSource, SeverityTable};
pub use planckian::apply_planckian_jitter;
pub use plasma::apply_plasma;

/// Planar `C x H x W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() || data.is_empty() {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![channels, height, width],
                rhs: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(format!("pixel {i} = {} outside [0, 1]", data[i])));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn clamped(channels: usize, height: usize, width: usize, mut data: Vec<f32>) -> Self {
        assert_eq!(channels * height * width, data.len());
        clamp_unit(&mut data);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::clamped(channels, height, width, vec![value; channels * height * width])
    }

    /// Image `index` of an `N x C x H x W` batch.
    pub fn from_batch(batch: &Tensor<f32>, index: usize) -> Result<Self> {
        if batch.rank() != 4 || index >= batch.rows() {
            return Err(Error::Shape {
                op: "image from batch",
                lhs: batch.shape().to_vec(),
                rhs: vec![index],
            });
        }
        let s = batch.shape();
        Ok(Self::clamped(s[1], s[2], s[3], batch.row(index).to_vec()))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn with_data(&self, mut data: Vec<f32>) -> Self {
        clamp_unit(&mut data);
        Self { data, ..*self }
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }
}

pub(crate) fn clamp_unit(data: &mut [f32]) {
    for v in data {
        *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    }
}

/// Stacks images into an `N x C x H x W` batch.
pub fn stack(images: &[Image]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::validation("cannot stack an empty image list"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.channels, img.height, img.width) != (first.channels, first.height, first.width) {
            return Err(Error::Shape {
                op: "stack",
                lhs: vec![first.channels, first.height, first.width],
                rhs: vec![img.channels, img.height, img.width],
            });
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), first.channels, first.height, first.width], data)
}

pub const GAMMA_RANGE: (f64, f64) = (0.5, 2.0);

/// Per-pixel `out = in ^ gamma`, with `gamma` in `[0.5, 2.0]`.
pub fn apply_gamma(img: &Image, gamma: f64) -> Result<Image> {
    if !(GAMMA_RANGE.0..=GAMMA_RANGE.1).contains(&gamma) {
        return Err(Error::validation(format!(
            "gamma {gamma} outside [{}, {}]",
            GAMMA_RANGE.0, GAMMA_RANGE.1
        )));
    }
    if gamma == 1.0 {
        return Ok(img.clone());
    }
    let g = gamma as f32;
    Ok(img.map(|v| v.powf(g)))
}

pub fn flip_horizontal(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        for y in 0..h {
            let row = &img.data[(c * h + y) * w..(c * h + y + 1) * w];
            data.extend(row.iter().rev());
        }
    }
    img.with_data(data)
}

/// Mirror padding without repeating the edge pixel (`dcb|abcd|cba`).
pub fn reflect_pad(img: &Image, pad: usize) -> Result<Image> {
    if pad >= img.height || pad >= img.width {
        return Err(Error::validation(format!(
            "reflect padding {pad} needs an image larger than {}x{}",
            img.height, img.width
        )));
    }
    let (h, w) = (img.height, img.width);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let r = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        r as usize
    };
    let mut data = Vec::with_capacity(img.channels * ph * pw);
    for c in 0..img.channels {
        for y in 0..ph {
            let sy = reflect(y as isize - pad as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize - pad as isize, w);
                data.push(img.at(c, sy, sx));
            }
        }
    }
    Ok(Image {
        channels: img.channels,
        height: ph,
        width: pw,
        data,
    })
}

pub fn crop(img: &Image, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
    if top + height > img.height || left + width > img.width {
        return Err(Error::validation(format!(
            "crop {height}x{width} at ({top}, {left}) exceeds {}x{} image",
            img.height, img.width
        )));
    }
    let mut data = Vec::with_capacity(img.channels * height * width);
    for c in 0..img.channels {
        for y in top..top + height {
            let start = (c * img.height + y) * img.width + left;
            data.extend_from_slice(&img.data[start..start + width]);
        }
    }
    Ok(Image {
        channels: img.channels,
        height,
        width,
        data,
    })
}

/// Padding used before the random crop.
pub const CROP_PAD: usize = 4;

/// Random horizontal flip (p = 0.5), reflect padding by 4, then a random
/// `crop x crop` window. Deterministic in `seed`.
pub fn preprocess_flip_crop(img: &Image, crop_size: (usize, usize), seed: u64) -> Result<Image> {
    let mut rng = seed::rng(seed);
    preprocess_with(img, crop_size, &mut rng)
}

pub fn preprocess_with<R: Rng + ?Sized>(img: &Image, (ch, cw): (usize, usize), rng: &mut R) -> Result<Image> {
    if img.height < ch || img.width < cw {
        return Err(Error::validation(format!(
            "image {}x{} smaller than crop {ch}x{cw}",
            img.height, img.width
        )));
    }
    let flip = rng.random::<bool>();
    let top = rng.random_range(0..=img.height + 2 * CROP_PAD - ch);
    let left = rng.random_range(0..=img.width + 2 * CROP_PAD - cw);
    let base = if flip { flip_horizontal(img) } else { img.clone() };
    crop(&reflect_pad(&base, CROP_PAD)?, top, left, ch, cw)
}

/// The training augmentations that can carry an operation label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Plasma,
    PlanckianJitter,
    Gamma,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Plasma => "plasma",
            OpKind::PlanckianJitter => "planckian_jitter",
            OpKind::Gamma => "gamma",
        }
    }
}

/// One concrete augmentation with its parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugOp {
    Identity,
    Plasma { roughness: f64, alpha: f64 },
    PlanckianJitter { temperature: f64 },
    Gamma { gamma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugOpDescriptor {
    pub op: AugOp,
    pub seed: u64,
}

impl AugOpDescriptor {
    pub fn identity() -> Self {
        Self {
            op: AugOp::Identity,
            seed: 0,
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        match self.op {
            AugOp::Identity => Ok(img.clone()),
            AugOp::Plasma { roughness, alpha } => apply_plasma(img, roughness, alpha, self.seed),
            AugOp::PlanckianJitter { temperature } => apply_planckian_jitter(img, temperature),
            AugOp::Gamma { gamma } => apply_gamma(img, gamma),
        }
    }
}

/// Ranges from which per-sample operation parameters are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugParams {
    /// Gamma is drawn log-uniformly so darkening and brightening are balanced.
    pub gamma: (f64, f64),
    pub temperature: (f64, f64),
    pub plasma_roughness: (f64, f64),
    pub plasma_alpha: (f64, f64),
    /// Probability that a training sample is left untransformed.
    pub identity_prob: f64,
}

impl Default for AugParams {
    fn default() -> Self {
        Self {
            gamma: GAMMA_RANGE,
            temperature: planckian::TEMPERATURE_RANGE,
            plasma_roughness: (0.4, 0.7),
            plasma_alpha: (0.2, 0.5),
            identity_prob: 0.5,
        }
    }
}

impl AugParams {
    pub fn validate(&self) -> Result<()> {
        let within = |name: &str, (lo, hi): (f64, f64), (min, max): (f64, f64)| {
            if lo > hi || lo < min || hi > max {
                Err(Error::config(format!(
                    "{name} range ({lo}, {hi}) must lie within [{min}, {max}]"
                )))
            } else {
                Ok(())
            }
        };
        within("gamma", self.gamma, GAMMA_RANGE)?;
        within("temperature", self.temperature, planckian::TEMPERATURE_RANGE)?;
        within("plasma_roughness", self.plasma_roughness, (f64::MIN_POSITIVE, 1.0))?;
        within("plasma_alpha", self.plasma_alpha, (0.0, 1.0))?;
        within("identity_prob", (self.identity_prob, self.identity_prob), (0.0, 1.0))
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Samples the operation applied to one training image: identity with
/// probability `identity_prob`, otherwise one of `ops` uniformly. Returns
/// the operation's position in `ops` (its label index) alongside.
pub fn sample_op<R: Rng + ?Sized>(ops: &[OpKind], params: &AugParams, rng: &mut R) -> (Option<usize>, AugOpDescriptor) {
    if ops.is_empty() || rng.random::<f64>() < params.identity_prob {
        return (None, AugOpDescriptor::identity());
    }
    let j = rng.random_range(0..ops.len());
    let op = match ops[j] {
        OpKind::Plasma => AugOp::Plasma {
            roughness: draw(rng, params.plasma_roughness),
            alpha: draw(rng, params.plasma_alpha),
        },
        OpKind::PlanckianJitter => AugOp::PlanckianJitter {
            temperature: draw(rng, params.temperature),
        },
        OpKind::Gamma => {
            let (lo, hi) = params.gamma;
            AugOp::Gamma {
                gamma: draw(rng, (lo.ln(), hi.ln())).exp().clamp(lo, hi),
            }
        }
    };
    (Some(j), AugOpDescriptor { op, seed: rng.random() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        let n = c * h * w;
        Image::clamped(c, h, w, (0..n).map(|i| i as f32 / n as f32).collect())
    }

    #[test]
    fn gamma_examples() {
        let img = ramp(3, 4, 4);
        assert_eq!(apply_gamma(&img, 1.0).unwrap(), img);
        let px = Image::filled(1, 1, 1, 0.25);
        assert_eq!(apply_gamma(&px, 2.0).unwrap().data(), &[0.0625]);
        let px = Image::filled(1, 1, 1, 0.16);
        assert!((apply_gamma(&px, 0.5).unwrap().data()[0] - 0.4).abs() < 1e-6);
        assert!(apply_gamma(&img, 2.5).is_err());
        assert!(apply_gamma(&img, 0.4).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(3, 5, 7);
        assert_ne!(flip_horizontal(&img), img);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn centre_crop_of_padded_image_is_identity() {
        let img = ramp(3, 32, 32);
        let padded = reflect_pad(&img, CROP_PAD).unwrap();
        assert_eq!((padded.height(), padded.width()), (40, 40));
        assert_eq!(crop(&padded, 4, 4, 32, 32).unwrap(), img);
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let img = Image::clamped(1, 1, 4, vec![0.1, 0.2, 0.3, 0.4]);
        // Height 1 cannot be padded; widen the check to a 4x4 image.
        assert!(reflect_pad(&img, 1).is_err());
        let img = ramp(1, 4, 4);
        let p = reflect_pad(&img, 2).unwrap();
        assert_eq!(p.at(0, 2, 0), img.at(0, 0, 2));
        assert_eq!(p.at(0, 2, 1), img.at(0, 0, 1));
        assert_eq!(p.at(0, 0, 2), img.at(0, 2, 0));
    }

    #[test]
    fn preprocessing_is_deterministic_and_checks_size() {
        let img = ramp(3, 32, 32);
        let a = preprocess_flip_crop(&img, (32, 32), 99).unwrap();
        let b = preprocess_flip_crop(&img, (32, 32), 99).unwrap();
        assert_eq!(a, b);
        let small = ramp(3, 16, 16);
        assert!(preprocess_flip_crop(&small, (32, 32), 1).is_err());
    }

    #[test]
    fn sampler_respects_identity_probability_and_ops() {
        let ops = [OpKind::Plasma, OpKind::Gamma, OpKind::PlanckianJitter];
        let params = AugParams::default();
        let mut rng = seed::rng(5);
        let mut counts = [0usize; 4];
        for _ in 0..6000 {
            let (j, d) = sample_op(&ops, &params, &mut rng);
            match j {
                None => {
                    assert_eq!(d.op, AugOp::Identity);
                    counts[3] += 1
                }
                Some(j) => counts[j] += 1,
            }
        }
        assert!((2700..3300).contains(&counts[3]), "{counts:?}");
        for c in &counts[..3] {
            assert!((850..1150).contains(c), "{counts:?}");
        }
        let (j, d) = sample_op(&[], &params, &mut rng);
        assert_eq!((j, d.op), (None, AugOp::Identity));
    }

    proptest! {
        #[test]
        fn every_augmentation_stays_in_unit_range(
            seed in any::<u64>(),
            gamma in 0.5f64..=2.0,
            temperature in 3000.0f64..=15000.0,
            roughness in 0.01f64..=1.0,
            alpha in 0.0f64..=1.0,
        ) {
            let mut rng = seed::rng(seed);
            let data: Vec<f32> = (0..3 * 9 * 11).map(|_| rng.random::<f32>()).collect();
            let img = Image::new(3, 9, 11, data).unwrap();
            let outs = [
                apply_gamma(&img, gamma).unwrap(),
                apply_planckian_jitter(&img, temperature).unwrap(),
                apply_plasma(&img, roughness, alpha, seed).unwrap(),
                preprocess_flip_crop(&img, (9, 11), seed).unwrap(),
            ];
            for out in &outs {
                prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert_eq!((out.channels(), out.height(), out.width()), (3, 9, 11));
            }
            for c in Corruption::ALL {
                for s in 1..=5 {
                    let spec = CorruptionSpec::new(c, s).unwrap();
                    let out = apply_corruption(&img, spec, seed).unwrap();
                    prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }
}
