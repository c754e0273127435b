//! L-infinity FGSM and PGD against the class head.
//!
//! The attack loss is cross-entropy against the true class. With
//! [`LogitMode::MaskedK`] only the first `K` logits enter that loss, which is
//! the classifier scored at test time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::seed;
use crate::tensor::{Tape, Tensor};
use crate::train::{supervised_step, BatchTargets, StepStats, Velocity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
}

impl AttackFamily {
    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitMode {
    /// Attack the `K` class logits only.
    #[default]
    MaskedK,
    /// Softmax over all `K + M` logits, target still the true class.
    FullKm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    #[serde(default)]
    pub logit_mode: LogitMode,
}

pub const EVAL_PGD_STEPS: usize = 40;
pub const TRAIN_PGD_STEPS: usize = 10;

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
            logit_mode: LogitMode::MaskedK,
        }
    }

    /// PGD with step size `epsilon / 4` and a random start.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        Self {
            family: AttackFamily::Pgd,
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            random_start: true,
            logit_mode: LogitMode::MaskedK,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("attack epsilon {} must be >= 0", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::config("attack needs at least one step"));
        }
        if self.family == AttackFamily::Fgsm && self.steps != 1 {
            return Err(Error::config("fgsm takes exactly one step"));
        }
        if self.family == AttackFamily::Pgd && self.epsilon > 0.0 && (self.step_size.is_nan() || self.step_size <= 0.0)
        {
            return Err(Error::config(format!("pgd step size {} must be > 0", self.step_size)));
        }
        Ok(())
    }

    /// Report key such as `pgd@0.03`.
    pub fn key(&self) -> String {
        format!("{}@{}", self.family.name(), self.epsilon)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutput {
    pub adversarial: Tensor<f32>,
    /// The loss gradient vanished everywhere; the input came back unchanged.
    pub zero_gradient: bool,
}

/// Gradient of the mean attack loss with respect to the input batch.
pub fn input_gradient(model: &Model, x: &Tensor<f32>, labels: &[usize], mode: LogitMode) -> Result<Tensor<f32>> {
    model.check_input(x.shape())?;
    if labels.len() != x.rows() {
        return Err(Error::Shape {
            op: "attack labels",
            lhs: x.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let k = model.config().num_classes;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let input = tape.leaf(x.clone());
    let out = model.forward(&mut tape, &params, input)?;
    let full = tape.value(out.logits)?.shape()[1];
    let (logits, width) = match mode {
        LogitMode::MaskedK if full > k => (tape.slice_cols(out.logits, 0, k)?, k),
        _ => (out.logits, full),
    };
    let mut targets = Tensor::zeros(vec![labels.len(), width]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::validation(format!("label {y} out of range for {k} classes")));
        }
        targets.data_mut()[i * width + y] = 1.0;
    }
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    let mut grads = tape.backward(loss, &[input])?;
    Ok(grads.take(input).expect("input is a tracked leaf"))
}

/// Inclusive per-element bounds of the ball `|v - x0| <= eps` intersected
/// with `[0, 1]`, tightened so the bound holds exactly in `f64`.
fn ball_bounds(x0: f32, eps: f64) -> (f32, f32) {
    let e = eps as f32;
    let mut lo = x0 - e;
    while (x0 as f64 - lo as f64) > eps {
        lo = lo.next_up();
    }
    let mut hi = x0 + e;
    while (hi as f64 - x0 as f64) > eps {
        hi = hi.next_down();
    }
    (lo.max(0.0), hi.min(1.0))
}

/// Clamps `x` into `[0, 1]` and the `eps`-ball around `x0`.
pub fn project_linf(x: &mut [f32], x0: &[f32], eps: f64) {
    for (v, &o) in x.iter_mut().zip(x0) {
        let (lo, hi) = ball_bounds(o, eps);
        *v = if v.is_nan() { o } else { v.clamp(lo, hi) };
    }
}

fn signed_step(x: &[f32], grad: &[f32], step: f64, x0: &[f32], eps: f64) -> Vec<f32> {
    let a = step as f32;
    let mut out: Vec<f32> = x
        .iter()
        .zip(grad)
        .map(|(&v, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            v + a * s
        })
        .collect();
    project_linf(&mut out, x0, eps);
    out
}

fn all_zero(t: &Tensor<f32>) -> bool {
    t.data().iter().all(|&g| g == 0.0)
}

fn unchanged(x: &Tensor<f32>, zero_gradient: bool) -> AttackOutput {
    AttackOutput {
        adversarial: x.clone(),
        zero_gradient,
    }
}

/// `x' = clip(x + eps * sign(grad))`.
pub fn fgsm(model: &Model, x: &Tensor<f32>, labels: &[usize], cfg: &AttackConfig) -> Result<AttackOutput> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(unchanged(x, false));
    }
    let grad = input_gradient(model, x, labels, cfg.logit_mode)?;
    if all_zero(&grad) {
        return Ok(unchanged(x, true));
    }
    let data = signed_step(x.data(), grad.data(), cfg.epsilon, x.data(), cfg.epsilon);
    Ok(AttackOutput {
        adversarial: Tensor::new(x.shape().to_vec(), data)?,
        zero_gradient: false,
    })
}

/// Iterated signed-gradient steps, projected after each one. `seed` drives
/// the random start.
pub fn pgd(model: &Model, x: &Tensor<f32>, labels: &[usize], cfg: &AttackConfig, seed: u64) -> Result<AttackOutput> {
    pgd_with_trace(model, x, labels, cfg, seed, |_| {})
}

/// [`pgd`] that also hands every iterate, including the start, to `trace`.
pub fn pgd_with_trace(
    model: &Model,
    x: &Tensor<f32>,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    mut trace: impl FnMut(&[f32]),
) -> Result<AttackOutput> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        trace(x.data());
        return Ok(unchanged(x, false));
    }
    let x0 = x.data();
    let mut cur = x0.to_vec();
    if cfg.random_start {
        let mut rng = seed::rng(seed);
        let e = cfg.epsilon as f32;
        for v in cur.iter_mut() {
            *v += rng.random_range(-e..=e);
        }
        project_linf(&mut cur, x0, cfg.epsilon);
    }
    trace(&cur);
    let mut any_gradient = false;
    for _ in 0..cfg.steps {
        let at = Tensor::new(x.shape().to_vec(), cur)?;
        let grad = input_gradient(model, &at, labels, cfg.logit_mode)?;
        any_gradient |= !all_zero(&grad);
        cur = signed_step(at.data(), grad.data(), cfg.step_size, x0, cfg.epsilon);
        trace(&cur);
    }
    if !any_gradient {
        return Ok(unchanged(x, true));
    }
    Ok(AttackOutput {
        adversarial: Tensor::new(x.shape().to_vec(), cur)?,
        zero_gradient: false,
    })
}

/// Dispatches on `cfg.family`.
pub fn attack(model: &Model, x: &Tensor<f32>, labels: &[usize], cfg: &AttackConfig, seed: u64) -> Result<AttackOutput> {
    match cfg.family {
        AttackFamily::Fgsm => fgsm(model, x, labels, cfg),
        AttackFamily::Pgd => pgd(model, x, labels, cfg, seed),
    }
}

/// Crafts adversarial inputs against the current weights, then takes one
/// optimizer step on them. No gradient flows into the generation.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_training_step(
    model: &mut Model,
    velocity: &mut Velocity,
    x: &Tensor<f32>,
    labels: &[usize],
    targets: &BatchTargets,
    cfg: &AttackConfig,
    lr: f64,
    momentum: f64,
    seed: u64,
) -> Result<StepStats> {
    let adv = attack(model, x, labels, cfg, seed)?;
    supervised_step(model, velocity, &adv.adversarial, labels, targets, lr, momentum)
}
