//! Training targets for the four regimes: one-hot, label augmentation,
//! label smoothing and multi-task.
//!
//! A label-augmentation target for class `i` transformed by operation `j` is
//! the concatenation `[(1 - delta) * onehot_K(i), delta * onehot_M(j)]`: mass
//! `1 - delta` at position `i` and `delta` at position `K + j`. Untransformed
//! samples use `delta = 0`, which is the one-hot label padded with `M` zeros.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Support of the smoothing factor for transformed samples.
pub const DELTA_RANGE: (f64, f64) = (0.05, 0.1);

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedLabel {
    pub values: Vec<f64>,
    pub class_index: usize,
    pub op_index: Option<usize>,
    pub delta: f64,
}

impl AugmentedLabel {
    /// Recovers `(class, op, delta)` from a raw `K + M` vector.
    pub fn decode(values: &[f64], k: usize) -> Result<(usize, Option<usize>, f64)> {
        if values.len() < k || k == 0 {
            return Err(Error::validation("label shorter than the class block"));
        }
        let class = argmax(&values[..k]);
        let ops = &values[k..];
        if ops.is_empty() {
            return Ok((class, None, 0.0));
        }
        let j = argmax(ops);
        if ops[j] > 0.0 {
            Ok((class, Some(j), ops[j]))
        } else {
            Ok((class, None, 0.0))
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Builds the `K + M` target. `op = None` is the identity transform and
/// requires `delta == 0`; a transformed sample requires `delta` in
/// `[0.05, 0.1]`.
pub fn make_la_label(k: usize, m: usize, class_index: usize, op: Option<usize>, delta: f64) -> Result<AugmentedLabel> {
    make_la_label_in(k, m, class_index, op, delta, DELTA_RANGE)
}

/// [`make_la_label`] with a configured delta range.
pub fn make_la_label_in(
    k: usize,
    m: usize,
    class_index: usize,
    op: Option<usize>,
    delta: f64,
    range: (f64, f64),
) -> Result<AugmentedLabel> {
    if class_index >= k {
        return Err(Error::validation(format!(
            "class index {class_index} out of range for K = {k}"
        )));
    }
    let mut values = vec![0.0; k + m];
    match op {
        None => {
            if delta != 0.0 {
                return Err(Error::validation(format!(
                    "identity samples carry delta = 0, got {delta}"
                )));
            }
            values[class_index] = 1.0;
        }
        Some(j) => {
            if j >= m {
                return Err(Error::validation(format!(
                    "operation index {j} out of range for M = {m}"
                )));
            }
            if !(range.0..=range.1).contains(&delta) {
                return Err(Error::validation(format!(
                    "delta {delta} outside [{}, {}]",
                    range.0, range.1
                )));
            }
            values[class_index] = 1.0 - delta;
            values[k + j] = delta;
        }
    }
    Ok(AugmentedLabel {
        values,
        class_index,
        op_index: op,
        delta,
    })
}

/// Draws `delta ~ U[lo, hi)`, by default `U[0.05, 0.1)`.
pub fn sample_delta<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    sample_delta_in(rng, DELTA_RANGE)
}

pub fn sample_delta_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedLabel {
    pub values: Vec<f64>,
    pub delta: f64,
}

/// `(1 - delta) * onehot_K(i) + delta * uniform_K`.
pub fn make_ls_label(k: usize, class_index: usize, delta: f64) -> Result<SmoothedLabel> {
    if class_index >= k {
        return Err(Error::validation(format!(
            "class index {class_index} out of range for K = {k}"
        )));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::validation(format!("delta {delta} outside [0, 1]")));
    }
    let off = delta / k as f64;
    let mut values = vec![off; k];
    values[class_index] = 1.0 - delta + off;
    Ok(SmoothedLabel { values, delta })
}

/// Targets of the two-head baseline. The operation head has `M + 1` slots;
/// slot `M` is the no-op class used for untransformed samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MtlTarget {
    pub class_onehot: Vec<f64>,
    pub op_onehot: Vec<f64>,
    /// `(1 - delta, delta)` for the class and operation losses.
    pub task_weights: (f64, f64),
}

pub fn make_mtl_target(k: usize, m: usize, class_index: usize, op: Option<usize>, delta: f64) -> Result<MtlTarget> {
    if class_index >= k {
        return Err(Error::validation(format!(
            "class index {class_index} out of range for K = {k}"
        )));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::validation(format!("delta {delta} outside [0, 1]")));
    }
    let slot = match op {
        Some(j) if j >= m => {
            return Err(Error::validation(format!(
                "operation index {j} out of range for M = {m}"
            )))
        }
        Some(j) => j,
        None => m,
    };
    let mut class_onehot = vec![0.0; k];
    class_onehot[class_index] = 1.0;
    let mut op_onehot = vec![0.0; m + 1];
    op_onehot[slot] = 1.0;
    Ok(MtlTarget {
        class_onehot,
        op_onehot,
        task_weights: (1.0 - delta, delta),
    })
}

/// How often delta is redrawn during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    #[default]
    PerSample,
    PerBatch,
}
