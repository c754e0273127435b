//! SGD with momentum under a per-step cosine schedule, and the six training
//! regimes.
//!
//! Every per-sample random choice (flip/crop, operation, delta) is drawn
//! from its own stream keyed by `(seed, epoch, sample_index, stream)`, so a
//! regime that makes no extra draws replays the standard regime exactly.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attacks::{adversarial_training_step, AttackConfig, TRAIN_PGD_STEPS};
use crate::augment::{preprocess_with, sample_op, AugParams, Image, OpKind};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::labels::{make_la_label_in, make_ls_label, make_mtl_target, sample_delta_in, DeltaMode, DELTA_RANGE};
use crate::nn::{masked_class_prediction, Model, ModelConfig};
use crate::seed::{self, stream};
use crate::tensor::checkpoint::NamedTensor;
use crate::tensor::{Tape, Tensor};

/// `eta_min + (lr0 - eta_min) * (1 + cos(pi * t / T)) / 2`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, eta_min: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::validation(format!("schedule step {t} outside 0..={total}")));
    }
    if t == total {
        return Ok(eta_min);
    }
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (PI * t as f64 / total as f64).cos()))
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity {
    buffers: Vec<Vec<f32>>,
}

impl Velocity {
    pub fn zeros_like(params: &[NamedTensor]) -> Self {
        Self {
            buffers: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn buffers(&self) -> &[Vec<f32>] {
        &self.buffers
    }
}

/// `v <- mu * v + g; p <- p - lr * v`.
pub fn sgd_momentum_step(
    params: &mut [NamedTensor],
    grads: &[Tensor<f32>],
    velocity: &mut Velocity,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.buffers.len() {
        return Err(Error::Shape {
            op: "sgd_momentum_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), velocity.buffers.len()],
        });
    }
    let (lr, mu) = (lr as f32, momentum as f32);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut velocity.buffers) {
        if p.tensor.shape() != g.shape() || v.len() != g.len() {
            return Err(Error::Shape {
                op: "sgd_momentum_step",
                lhs: p.tensor.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for ((w, &gi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = mu * *vi + gi;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Standard,
    La,
    Ls,
    Mtl,
    AdvFgsm,
    AdvPgd,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::La => "la",
            Regime::Ls => "ls",
            Regime::Mtl => "mtl",
            Regime::AdvFgsm => "adv_fgsm",
            Regime::AdvPgd => "adv_pgd",
        }
    }
}

pub const DEFAULT_ADV_EPSILON: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub lr0: f64,
    /// Cosine floor; `1e-4 * lr0` by default.
    pub eta_min: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Set from the experiment's top-level seed, never from a config file.
    #[serde(skip)]
    pub seed: u64,
    pub delta_range: (f64, f64),
    pub delta_mode: DeltaMode,
    /// Operation list; an operation's label index is its position here.
    pub ops: Vec<OpKind>,
    pub aug: AugParams,
    /// Attack used by the adversarial regimes. Defaults to epsilon 0.3 and,
    /// for PGD, 10 steps.
    pub attack: Option<AttackConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Standard,
            epochs: 25,
            lr0: 0.1,
            eta_min: 1e-5,
            momentum: 0.9,
            batch_size: 128,
            seed: 0,
            delta_range: DELTA_RANGE,
            delta_mode: DeltaMode::PerSample,
            ops: vec![OpKind::Plasma, OpKind::Gamma, OpKind::PlanckianJitter],
            aug: AugParams::default(),
            attack: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.lr0 > self.eta_min && self.eta_min >= 0.0) {
            return Err(Error::config(format!(
                "need lr0 > eta_min >= 0, got lr0 = {}, eta_min = {}",
                self.lr0, self.eta_min
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        let (lo, hi) = self.delta_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!(
                "delta_range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
            )));
        }
        for (i, op) in self.ops.iter().enumerate() {
            if self.ops[..i].contains(op) {
                return Err(Error::config(format!("operation `{}` listed twice", op.name())));
            }
        }
        self.aug.validate()?;
        if let Some(a) = self.attack_config() {
            a.validate()?;
        }
        Ok(())
    }

    /// Attack for the adversarial regimes, `None` otherwise.
    pub fn attack_config(&self) -> Option<AttackConfig> {
        match self.regime {
            Regime::AdvFgsm => Some(self.attack.unwrap_or_else(|| AttackConfig::fgsm(DEFAULT_ADV_EPSILON))),
            Regime::AdvPgd => Some(
                self.attack
                    .unwrap_or_else(|| AttackConfig::pgd(DEFAULT_ADV_EPSILON, TRAIN_PGD_STEPS)),
            ),
            _ => None,
        }
    }

    /// Errors when the model cannot be trained under this regime.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        let mtl = self.regime == Regime::Mtl;
        if mtl != model.multitask {
            return Err(Error::Incompatible(format!(
                "regime `{}` needs a {} model",
                self.regime.name(),
                if mtl { "two-head" } else { "single-head" }
            )));
        }
        if matches!(self.regime, Regime::La | Regime::Mtl) && model.num_ops != self.ops.len() {
            return Err(Error::Incompatible(format!(
                "regime `{}` with {} operations needs num_ops = {}, model has {}",
                self.regime.name(),
                self.ops.len(),
                self.ops.len(),
                model.num_ops
            )));
        }
        Ok(())
    }
}

/// Targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    /// Distribution over the single head's columns.
    Soft(Tensor<f32>),
    /// Two-head targets with per-sample delta.
    MultiTask {
        class: Tensor<f32>,
        ops: Tensor<f32>,
        delta: Vec<f32>,
    },
}

impl BatchTargets {
    /// One-hot rows over `width` columns.
    pub fn one_hot(labels: &[usize], width: usize) -> Self {
        let mut t = Tensor::zeros(vec![labels.len(), width]);
        for (i, &y) in labels.iter().enumerate() {
            t.data_mut()[i * width + y] = 1.0;
        }
        BatchTargets::Soft(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// One forward/backward pass and optimizer update on a prepared batch.
pub fn supervised_step(
    model: &mut Model,
    velocity: &mut Velocity,
    x: &Tensor<f32>,
    labels: &[usize],
    targets: &BatchTargets,
    lr: f64,
    momentum: f64,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let input = tape.constant(x.clone());
    let out = model.forward(&mut tape, &params, input)?;
    let loss = match (targets, out.op_logits) {
        (BatchTargets::Soft(t), None) => tape.softmax_cross_entropy(out.logits, t)?,
        (BatchTargets::MultiTask { class, ops, delta }, Some(op_logits)) => {
            let class_w: Vec<f32> = delta.iter().map(|d| 1.0 - d).collect();
            let a = tape.softmax_cross_entropy_weighted(out.logits, class, &class_w)?;
            let b = tape.softmax_cross_entropy_weighted(op_logits, ops, delta)?;
            tape.add(a, b)?
        }
        _ => {
            return Err(Error::Incompatible(
                "batch targets do not match the model's head layout".into(),
            ))
        }
    };
    let loss_value = tape.value(loss)?.data()[0] as f64;
    let logits = tape.value(out.logits)?.clone();
    let mut grads = tape.backward(loss, &params)?;
    let grads: Vec<Tensor<f32>> = params
        .iter()
        .map(|&p| grads.take(p).expect("parameters are tracked leaves"))
        .collect();
    sgd_momentum_step(model.params_mut(), &grads, velocity, lr, momentum)?;
    let pred = masked_class_prediction(&logits, model.config().num_classes)?;
    let correct = pred.classes.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(StepStats {
        loss: loss_value,
        correct,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Percent, on the augmented training batches.
    pub train_accuracy: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,train_accuracy,lr\n");
    for e in log {
        writeln!(out, "{},{},{},{}", e.epoch, e.mean_loss, e.train_accuracy, e.lr).unwrap();
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Learning rate of every optimizer step, in order.
    pub step_lrs: Vec<f64>,
}

/// One augmented batch with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub targets: BatchTargets,
}

/// Builds the inputs and targets of batch `batch_no` of `epoch`.
pub fn prepare_batch(
    cfg: &TrainConfig,
    model: &ModelConfig,
    ds: &Dataset,
    indices: &[usize],
    epoch: u64,
    batch_no: u64,
) -> Result<PreparedBatch> {
    let k = model.num_classes;
    let m = model.num_ops;
    let [_, h, w] = model.input_shape;
    let batch_delta = sample_delta_in(
        &mut seed::rng_for(&[cfg.seed, epoch, batch_no, stream::DELTA, u64::MAX]),
        cfg.delta_range,
    );
    let draw_delta = |idx: u64| match cfg.delta_mode {
        DeltaMode::PerSample => sample_delta_in(
            &mut seed::rng_for(&[cfg.seed, epoch, idx, stream::DELTA]),
            cfg.delta_range,
        ),
        DeltaMode::PerBatch => batch_delta,
    };

    let n = indices.len();
    let width = model.class_head_width();
    let mut images: Vec<Image> = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut soft = Vec::with_capacity(n * width);
    let mut op_rows = Vec::new();
    let mut deltas = Vec::new();
    for &i in indices {
        let idx = i as u64;
        let y = ds.labels[i];
        let mut pre_rng = seed::rng_for(&[cfg.seed, epoch, idx, stream::PREPROCESS]);
        let mut img = preprocess_with(&ds.image(i), (h, w), &mut pre_rng)?;
        match cfg.regime {
            Regime::Standard | Regime::AdvFgsm | Regime::AdvPgd => {
                let mut row = vec![0.0f32; width];
                row[y] = 1.0;
                soft.extend(row);
            }
            Regime::Ls => {
                let label = make_ls_label(k, y, draw_delta(idx))?;
                soft.extend(label.values.iter().map(|&v| v as f32));
                soft.extend(std::iter::repeat_n(0.0, width - k));
            }
            Regime::La | Regime::Mtl => {
                let mut aug_rng = seed::rng_for(&[cfg.seed, epoch, idx, stream::AUGMENT]);
                let (op, desc) = sample_op(&cfg.ops, &cfg.aug, &mut aug_rng);
                img = desc.apply(&img)?;
                let delta = if op.is_some() { draw_delta(idx) } else { 0.0 };
                if cfg.regime == Regime::La {
                    let label = make_la_label_in(k, m, y, op, delta, cfg.delta_range)?;
                    soft.extend(label.values.iter().map(|&v| v as f32));
                } else {
                    let t = make_mtl_target(k, m, y, op, delta)?;
                    soft.extend(t.class_onehot.iter().map(|&v| v as f32));
                    op_rows.extend(t.op_onehot.iter().map(|&v| v as f32));
                    deltas.push(t.task_weights.1 as f32);
                }
            }
        }
        images.push(img);
        labels.push(y);
    }
    let x = crate::augment::stack(&images)?;
    let class = Tensor::new(vec![n, width], soft)?;
    let targets = if cfg.regime == Regime::Mtl {
        BatchTargets::MultiTask {
            class,
            ops: Tensor::new(vec![n, m + 1], op_rows)?,
            delta: deltas,
        }
    } else {
        BatchTargets::Soft(class)
    };
    Ok(PreparedBatch { x, labels, targets })
}

pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with_observer(cfg, model_cfg, ds, |_, _| Ok(()))
}

/// [`train`], calling `observer` after every epoch (for periodic checkpoints).
pub fn train_with_observer(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    ds: &Dataset,
    mut observer: impl FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_model(model_cfg)?;
    if model_cfg.num_classes != ds.num_classes {
        return Err(Error::Incompatible(format!(
            "model has {} classes, dataset has {}",
            model_cfg.num_classes, ds.num_classes
        )));
    }
    let mut model = Model::new(model_cfg.clone())?;
    let mut velocity = Velocity::zeros_like(model.params());
    let attack = cfg.attack_config();
    let per_epoch = ds.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total);
    let mut step_lrs = Vec::with_capacity(total);

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let (mut loss_sum, mut correct) = (0.0, 0);
        let mut lr = cfg.lr0;
        for (b, indices) in batches(ds.len(), cfg.batch_size, cfg.seed, e)?.iter().enumerate() {
            lr = cosine_lr(step, total, cfg.lr0, cfg.eta_min)?;
            let batch = prepare_batch(cfg, model_cfg, ds, indices, e, b as u64)?;
            let stats = match &attack {
                Some(a) => adversarial_training_step(
                    &mut model,
                    &mut velocity,
                    &batch.x,
                    &batch.labels,
                    &batch.targets,
                    a,
                    lr,
                    cfg.momentum,
                    seed::derive(&[cfg.seed, e, b as u64, stream::ATTACK]),
                )?,
                None => supervised_step(
                    &mut model,
                    &mut velocity,
                    &batch.x,
                    &batch.labels,
                    &batch.targets,
                    lr,
                    cfg.momentum,
                )?,
            };
            if !stats.loss.is_finite() {
                return Err(Error::validation(format!(
                    "loss diverged at epoch {} step {step}",
                    epoch + 1
                )));
            }
            loss_sum += stats.loss * indices.len() as f64;
            correct += stats.correct;
            step_losses.push(stats.loss);
            step_lrs.push(lr);
            step += 1;
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / ds.len() as f64,
            train_accuracy: 100.0 * correct as f64 / ds.len() as f64,
            lr,
        };
        observer(&entry, &model)?;
        log.push(entry);
    }
    Ok(TrainOutcome {
        model,
        log,
        step_losses,
        step_lrs,
    })
}
