//! Desk-scale classifiers with a `K + M` output head.
//!
//! Output layout: class logits occupy columns `0..K`, augmentation-operation
//! logits `K..K+M`. The multi-task variant instead carries two heads over one
//! shared trunk: a `K`-way class head and an `M + 1`-way operation head whose
//! last slot is the no-op class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::NamedTensor;
use crate::tensor::{softmax_rows, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    SmallCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub num_ops: usize,
    /// Hidden widths for `mlp`, channel plan for `small_cnn`.
    pub hidden: Vec<usize>,
    pub init_seed: u64,
    /// Shared trunk with separate class and operation heads.
    #[serde(default)]
    pub multitask: bool,
}

impl ModelConfig {
    pub fn new(arch: Arch, num_classes: usize, num_ops: usize) -> Self {
        Self {
            arch,
            input_shape: [3, 32, 32],
            num_classes,
            num_ops,
            hidden: Self::default_hidden(arch),
            init_seed: 0,
            multitask: false,
        }
    }

    pub fn default_hidden(arch: Arch) -> Vec<usize> {
        match arch {
            Arch::Mlp => vec![128],
            Arch::SmallCnn => vec![16, 32],
        }
    }

    /// Width of the head scored at test time and attacked.
    pub fn class_head_width(&self) -> usize {
        if self.multitask {
            self.num_classes
        } else {
            self.num_classes + self.num_ops
        }
    }

    pub fn op_head_width(&self) -> Option<usize> {
        self.multitask.then_some(self.num_ops + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("model needs at least two classes"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config(format!(
                "hidden widths must be non-empty and positive, got {:?}",
                self.hidden
            )));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::config("input shape has a zero extent"));
        }
        if self.multitask && self.num_ops == 0 {
            return Err(Error::config("multi-task model needs at least one operation"));
        }
        if self.arch == Arch::SmallCnn {
            let div = 1usize << self.hidden.len();
            let [_, h, w] = self.input_shape;
            if h % div != 0 || w % div != 0 {
                return Err(Error::config(format!(
                    "small_cnn with {} conv stages needs H and W divisible by {div}, got {h}x{w}",
                    self.hidden.len()
                )));
            }
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [c, h, w] = self.input_shape;
        let mut shapes = Vec::new();
        let features = match self.arch {
            Arch::Mlp => {
                let mut fan_in = c * h * w;
                for (i, &width) in self.hidden.iter().enumerate() {
                    shapes.push((format!("fc{i}.weight"), vec![fan_in, width]));
                    shapes.push((format!("fc{i}.bias"), vec![width]));
                    fan_in = width;
                }
                fan_in
            }
            Arch::SmallCnn => {
                let mut channels = c;
                for (i, &out) in self.hidden.iter().enumerate() {
                    shapes.push((format!("conv{i}.weight"), vec![out, channels, 3, 3]));
                    shapes.push((format!("conv{i}.bias"), vec![out]));
                    channels = out;
                }
                let div = 1usize << self.hidden.len();
                channels * (h / div) * (w / div)
            }
        };
        shapes.push(("head.weight".into(), vec![features, self.class_head_width()]));
        shapes.push(("head.bias".into(), vec![self.class_head_width()]));
        if let Some(width) = self.op_head_width() {
            shapes.push(("op_head.weight".into(), vec![features, width]));
            shapes.push(("op_head.bias".into(), vec![width]));
        }
        shapes
    }
}

/// Logit vars produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Output {
    /// `N x (K + M)`, or `N x K` for multi-task models.
    pub logits: Var,
    /// `N x (M + 1)` operation head of a multi-task model.
    pub op_logits: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<NamedTensor>,
}

impl Model {
    /// Builds a model with He-uniform fan-in weights and zero biases.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let params = cfg
            .layer_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = match shape.len() {
                        2 => shape[0],
                        _ => shape[1..].iter().product(),
                    };
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
                };
                NamedTensor { name, tensor }
            })
            .collect();
        Ok(Self { cfg, params })
    }

    /// Restores a model from checkpoint records; names and shapes must match
    /// what `cfg` would build.
    pub fn from_records(cfg: ModelConfig, records: Vec<NamedTensor>) -> Result<Self> {
        cfg.validate()?;
        let expected = cfg.layer_shapes();
        if expected.len() != records.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, architecture expects {}",
                records.len(),
                expected.len()
            )));
        }
        for ((name, shape), rec) in expected.iter().zip(&records) {
            if name != &rec.name || shape.as_slice() != rec.tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    rec.name,
                    rec.tensor.shape()
                )));
            }
        }
        Ok(Self { cfg, params: records })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.cfg.input_shape {
            return Err(Error::Shape {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: self.cfg.input_shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Differentiable forward pass of `input: N x C x H x W`.
    pub fn forward(&self, tape: &mut Tape<f32>, params: &[Var], input: Var) -> Result<Output> {
        self.check_input(tape.value(input)?.shape())?;
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("bound parameter list matches the model");
        let features = match self.cfg.arch {
            Arch::Mlp => {
                let mut h = tape.flatten(input)?;
                for _ in &self.cfg.hidden {
                    let (w, b) = (next(), next());
                    h = tape.matmul(h, w)?;
                    h = tape.add_bias(h, b)?;
                    h = tape.relu(h)?;
                }
                h
            }
            Arch::SmallCnn => {
                let mut h = input;
                for _ in &self.cfg.hidden {
                    let (w, b) = (next(), next());
                    h = tape.conv2d(h, w, 1, 1)?;
                    h = tape.add_bias(h, b)?;
                    h = tape.relu(h)?;
                    h = tape.max_pool2d(h, 2)?;
                }
                tape.flatten(h)?
            }
        };
        let (w, b) = (next(), next());
        let logits = tape.matmul(features, w)?;
        let logits = tape.add_bias(logits, b)?;
        let op_logits = if self.cfg.multitask {
            let (w, b) = (next(), next());
            let z = tape.matmul(features, w)?;
            Some(tape.add_bias(z, b)?)
        } else {
            None
        };
        Ok(Output { logits, op_logits })
    }

    /// Inference-only class-head logits.
    pub fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(out.logits)?.clone())
    }

    /// Masked `K`-way prediction for a batch.
    pub fn predict(&self, batch: &Tensor<f32>) -> Result<Prediction> {
        masked_class_prediction(&self.logits(batch)?, self.cfg.num_classes)
    }
}

/// Class predictions and `K`-way probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub probs: Tensor<f32>,
}

impl Prediction {
    /// Winning softmax score of each row.
    pub fn confidences(&self) -> Vec<f32> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, &c)| self.probs.row(i)[c])
            .collect()
    }
}

/// Drops every logit past the first `k` *before* the softmax, then takes the
/// argmax over the remaining class scores.
pub fn masked_class_prediction(logits: &Tensor<f32>, k: usize) -> Result<Prediction> {
    if logits.rank() != 2 || k == 0 || k > logits.shape()[1] {
        return Err(Error::Shape {
            op: "masked_class_prediction",
            lhs: logits.shape().to_vec(),
            rhs: vec![k],
        });
    }
    let width = logits.shape()[1];
    let mut kept = Vec::with_capacity(logits.rows() * k);
    for row in logits.data().chunks_exact(width) {
        kept.extend_from_slice(&row[..k]);
    }
    let probs = softmax_rows(&kept, k);
    let classes = probs.chunks_exact(k).map(argmax).collect();
    Ok(Prediction {
        classes,
        probs: Tensor::new(vec![logits.rows(), k], probs)?,
    })
}

/// Index of the first maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
