//! Independent reference implementations. Written from the definitions,
//! sharing no code with the library.

use std::collections::BTreeMap;

/// `(confidence, correct)` pairs binned by brute force: every record's bin
/// is found by scanning its rank among all records.
pub fn binned_calibration(records: &[(f64, bool)], bins: usize, equal_width: bool) -> (f64, f64) {
    let n = records.len();
    let mut bin_of = vec![0usize; n];
    if equal_width {
        for (i, &(c, _)) in records.iter().enumerate() {
            // Bin m holds ((m-1)/M, m/M]; scan upward for the first upper edge >= c.
            let mut m = 1;
            while m < bins && c > m as f64 / bins as f64 {
                m += 1;
            }
            bin_of[i] = m - 1;
        }
    } else {
        let base = n / bins;
        let extra = n % bins;
        for i in 0..n {
            // Rank under (confidence, index) ordering.
            let rank = (0..n)
                .filter(|&j| records[j].0 < records[i].0 || (records[j].0 == records[i].0 && j < i))
                .count();
            let mut upper = 0;
            let mut b = 0;
            loop {
                upper += base + if b < extra { 1 } else { 0 };
                if rank < upper {
                    break;
                }
                b += 1;
            }
            bin_of[i] = b;
        }
    }
    let mut ece = 0.0;
    let mut sq = 0.0;
    for b in 0..bins {
        let members: Vec<usize> = (0..n).filter(|&i| bin_of[i] == b).collect();
        if members.is_empty() {
            continue;
        }
        let size = members.len() as f64;
        let acc = members.iter().filter(|&&i| records[i].1).count() as f64 / size;
        let conf = members.iter().map(|&i| records[i].0).sum::<f64>() / size;
        ece += size / n as f64 * (acc - conf).abs();
        sq += size / n as f64 * (acc - conf).powi(2);
    }
    (ece, sq.sqrt())
}

/// Mean over severities, then over corruptions.
pub fn mean_of_means(table: &BTreeMap<String, Vec<f64>>) -> (BTreeMap<String, f64>, f64) {
    let per: BTreeMap<String, f64> = table
        .iter()
        .map(|(k, v)| {
            let mut total = 0.0;
            for x in v {
                total += x;
            }
            (k.clone(), total / v.len() as f64)
        })
        .collect();
    let mut total = 0.0;
    for v in per.values() {
        total += v;
    }
    let mce = total / per.len() as f64;
    (per, mce)
}

/// Relative change as a spreadsheet would compute it: `(new/old - 1) * 100`.
pub fn spreadsheet_pct(new: f64, old: f64) -> f64 {
    (new / old - 1.0) * 100.0
}

/// Mean softmax cross-entropy of `logits` (row-major, `cols` wide) against
/// soft targets, with optional per-row weights, in `f64`.
pub fn cross_entropy(logits: &[f64], targets: &[f64], cols: usize, weights: Option<&[f64]>) -> f64 {
    let rows = logits.len() / cols;
    let mut total = 0.0;
    for r in 0..rows {
        let z = &logits[r * cols..(r + 1) * cols];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let ce: f64 = (0..cols).map(|c| -targets[r * cols + c] * (z[c] - lse)).sum();
        total += weights.map_or(1.0, |w| w[r]) * ce;
    }
    total / rows as f64
}

/// Gradient of mean CE w.r.t. the input of a linear classifier
/// `z = x W + b` (W stored `d x k`) for one-hot targets.
pub fn linear_input_gradient(x: &[f64], w: &[f64], b: &[f64], labels: &[usize], d: usize, k: usize) -> Vec<f64> {
    let n = labels.len();
    let mut grad = vec![0.0; n * d];
    for r in 0..n {
        let z: Vec<f64> = (0..k)
            .map(|c| b[c] + (0..d).map(|i| x[r * d + i] * w[i * k + c]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for i in 0..d {
            let mut g = 0.0;
            for c in 0..k {
                let p = e[c] / s;
                let t = if c == labels[r] { 1.0 } else { 0.0 };
                g += (p - t) * w[i * k + c];
            }
            grad[r * d + i] = g / n as f64;
        }
    }
    grad
}

/// Folded-normal mean `E|N(0, sigma^2)| = sigma * sqrt(2 / pi)`.
pub fn folded_normal_mean(sigma: f64) -> f64 {
    sigma * (2.0 / std::f64::consts::PI).sqrt()
}
