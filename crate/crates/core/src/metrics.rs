//! Error rates, corruption errors and binned calibration errors.
//!
//! Rates in an [`EvalReport`] are percentages. [`calibration_errors`] returns
//! fractions; the report scales them by 100 like the error rates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackFamily, LogitMode};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 15;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `100 * (1 - accuracy)`.
pub fn error_rate(preds: &[usize], truths: &[usize]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::Shape {
            op: "error_rate",
            lhs: vec![preds.len()],
            rhs: vec![truths.len()],
        });
    }
    if preds.is_empty() {
        return Err(Error::validation("error rate of an empty prediction set"));
    }
    let wrong = preds.iter().zip(truths).filter(|(p, t)| p != t).count();
    Ok(100.0 * wrong as f64 / preds.len() as f64)
}

pub const SEVERITY_COUNT: usize = 5;

/// Per-corruption mean over the five severities, then the mean of those.
pub fn corruption_errors(per_severity: &BTreeMap<String, Vec<f64>>) -> Result<(BTreeMap<String, f64>, f64)> {
    if per_severity.is_empty() {
        return Err(Error::validation("no corruption errors to aggregate"));
    }
    let mut ce = BTreeMap::new();
    for (name, errors) in per_severity {
        if errors.len() != SEVERITY_COUNT {
            return Err(Error::validation(format!(
                "corruption `{name}` has {} severities, expected {SEVERITY_COUNT}",
                errors.len()
            )));
        }
        ce.insert(name.clone(), errors.iter().sum::<f64>() / SEVERITY_COUNT as f64);
    }
    let mce = ce.values().sum::<f64>() / ce.len() as f64;
    Ok((ce, mce))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRecord {
    /// Winning softmax score.
    pub confidence: f64,
    pub predicted: usize,
    pub truth: usize,
}

impl PredictionRecord {
    pub fn new(confidence: f64, predicted: usize, truth: usize) -> Result<Self> {
        if !(confidence > 0.0 && confidence <= 1.0) {
            return Err(Error::validation(format!("confidence {confidence} outside (0, 1]")));
        }
        Ok(Self {
            confidence,
            predicted,
            truth,
        })
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.truth
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinMode {
    /// Contiguous groups of the confidence-sorted records.
    #[default]
    EqualCount,
    /// `M` equal intervals `((m-1)/M, m/M]` of confidence.
    EqualWidth,
}

impl BinMode {
    pub fn name(self) -> &'static str {
        match self {
            BinMode::EqualCount => "equal_count",
            BinMode::EqualWidth => "equal_width",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub ece: f64,
    pub rms: f64,
}

/// Sizes of the equal-count groups: `n / m`, the first `n % m` one larger.
pub fn equal_count_sizes(n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|b| n / m + usize::from(b < n % m)).collect()
}

pub fn calibration_errors(records: &[PredictionRecord], bins: usize, mode: BinMode) -> Result<Calibration> {
    let n = records.len();
    if n == 0 {
        return Err(Error::validation("calibration of an empty record set"));
    }
    if bins == 0 {
        return Err(Error::validation("calibration needs at least one bin"));
    }
    let groups: Vec<Vec<&PredictionRecord>> = match mode {
        BinMode::EqualCount => {
            if bins > n {
                return Err(Error::validation(format!("{bins} equal-count bins for {n} records")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| records[a].confidence.total_cmp(&records[b].confidence).then(a.cmp(&b)));
            let mut start = 0;
            equal_count_sizes(n, bins)
                .into_iter()
                .map(|size| {
                    let group = order[start..start + size].iter().map(|&i| &records[i]).collect();
                    start += size;
                    group
                })
                .collect()
        }
        BinMode::EqualWidth => {
            let mut groups = vec![Vec::new(); bins];
            for r in records {
                let b = ((r.confidence * bins as f64).ceil() as usize).clamp(1, bins) - 1;
                groups[b].push(r);
            }
            groups
        }
    };
    let (mut ece, mut sq) = (0.0, 0.0);
    for group in groups.iter().filter(|g| !g.is_empty()) {
        let size = group.len() as f64;
        let acc = group.iter().filter(|r| r.correct()).count() as f64 / size;
        let conf = group.iter().map(|r| r.confidence).sum::<f64>() / size;
        let weight = size / n as f64;
        ece += weight * (acc - conf).abs();
        sq += weight * (acc - conf) * (acc - conf);
    }
    Ok(Calibration { ece, rms: sq.sqrt() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionResult {
    /// Error at severities 1..=5.
    pub severity_errors: Vec<f64>,
    pub ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationResult {
    pub bins: usize,
    pub mode: BinMode,
    pub ece: f64,
    pub rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackResult {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub logit_mode: LogitMode,
    pub error: f64,
}

impl AttackResult {
    pub fn new(cfg: &AttackConfig, error: f64) -> Self {
        Self {
            family: cfg.family,
            epsilon: cfg.epsilon,
            steps: cfg.steps,
            step_size: cfg.step_size,
            random_start: cfg.random_start,
            logit_mode: cfg.logit_mode,
            error,
        }
    }

    /// Label such as `FGSM@0.03`.
    pub fn label(&self) -> String {
        format!("{}@{}", self.family.name().to_uppercase(), self.epsilon)
    }
}

/// Everything measured for one trained model. Maps are ordered, so the JSON
/// encoding is canonical and byte-comparable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub test_samples: usize,
    pub clean_error: f64,
    pub corruptions: BTreeMap<String, CorruptionResult>,
    pub mce: Option<f64>,
    pub calibration: CalibrationResult,
    pub attacks: BTreeMap<String, AttackResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "report schema version {} (expected {REPORT_SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }

    /// Headline metrics in table order: Clean, mCE, ECE, RMS, then attacks.
    pub fn metric_rows(&self) -> Vec<(String, Option<f64>)> {
        let mut rows = vec![
            ("Clean".to_owned(), Some(self.clean_error)),
            ("mCE".to_owned(), self.mce),
            ("ECE".to_owned(), Some(self.calibration.ece)),
            ("RMS".to_owned(), Some(self.calibration.rms)),
        ];
        let mut attacks: Vec<&AttackResult> = self.attacks.values().collect();
        attacks.sort_by(|a, b| a.family.cmp(&b.family).then(a.epsilon.total_cmp(&b.epsilon)));
        rows.extend(attacks.into_iter().map(|a| (a.label(), Some(a.error))));
        rows
    }

    /// Header line and one flat data line, both LF-terminated.
    pub fn to_csv(&self) -> String {
        let mut header = vec![
            "schema_version".to_owned(),
            "test_samples".to_owned(),
            "clean_error".to_owned(),
            "mce".to_owned(),
            "ece".to_owned(),
            "rms".to_owned(),
            "calibration_bins".to_owned(),
            "calibration_mode".to_owned(),
        ];
        let mut row = vec![
            self.schema_version.to_string(),
            self.test_samples.to_string(),
            self.clean_error.to_string(),
            self.mce.map(|v| v.to_string()).unwrap_or_default(),
            self.calibration.ece.to_string(),
            self.calibration.rms.to_string(),
            self.calibration.bins.to_string(),
            self.calibration.mode.name().to_owned(),
        ];
        for (name, c) in &self.corruptions {
            for (s, e) in c.severity_errors.iter().enumerate() {
                header.push(format!("{name}_s{}", s + 1));
                row.push(e.to_string());
            }
            header.push(format!("{name}_ce"));
            row.push(c.ce.to_string());
        }
        for (key, a) in &self.attacks {
            header.push(format!("{key}_error"));
            row.push(a.error.to_string());
        }
        let mut out = String::new();
        writeln!(out, "{}", header.join(",")).unwrap();
        writeln!(out, "{}", row.join(",")).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(confidence: f64, correct: bool) -> PredictionRecord {
        PredictionRecord::new(confidence, 0, usize::from(!correct)).unwrap()
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(error_rate(&[0, 0], &[1, 1]).unwrap(), 100.0);
        let preds = [0, 1, 2, 3, 4, 5, 6, 0, 0, 0];
        let truths = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
        assert_eq!(error_rate(&preds, &truths).unwrap(), 30.0);
        assert!(error_rate(&[], &[]).is_err());
        assert!(error_rate(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn corruption_error_examples() {
        let mut m = BTreeMap::new();
        m.insert("gaussian_noise".to_owned(), vec![10.0, 20.0, 30.0, 40.0, 50.0]);
        let (ce, mce) = corruption_errors(&m).unwrap();
        assert_eq!(ce["gaussian_noise"], 30.0);
        assert_eq!(mce, 30.0);
        m.insert("contrast".to_owned(), vec![1.0; 4]);
        assert!(corruption_errors(&m).is_err());
        assert!(corruption_errors(&BTreeMap::new()).is_err());
    }

    #[test]
    fn single_bin_arithmetic() {
        let records: Vec<_> = (0..10).map(|i| rec(0.9, i % 2 == 0)).collect();
        for mode in [BinMode::EqualCount, BinMode::EqualWidth] {
            let c = calibration_errors(&records, 1, mode).unwrap();
            assert!((c.ece - 0.4).abs() < 1e-12 && (c.rms - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn perfectly_calibrated_bins_score_zero() {
        // Two equal-count bins: confidence 0.5 with half right, 1.0 all right.
        let mut records: Vec<_> = (0..4).map(|i| rec(0.5, i < 2)).collect();
        records.extend((0..4).map(|_| rec(1.0, true)));
        let c = calibration_errors(&records, 2, BinMode::EqualCount).unwrap();
        assert_eq!((c.ece, c.rms), (0.0, 0.0));
    }

    #[test]
    fn equal_count_sizes_spread_the_remainder_first() {
        assert_eq!(equal_count_sizes(17, 5), vec![4, 4, 3, 3, 3]);
        assert_eq!(equal_count_sizes(15, 15), vec![1; 15]);
    }

    #[test]
    fn calibration_input_errors() {
        let records = vec![rec(0.7, true); 3];
        assert!(calibration_errors(&records, 4, BinMode::EqualCount).is_err());
        assert!(calibration_errors(&records, 4, BinMode::EqualWidth).is_ok());
        assert!(calibration_errors(&records, 0, BinMode::EqualWidth).is_err());
        assert!(calibration_errors(&[], 1, BinMode::EqualWidth).is_err());
        assert!(PredictionRecord::new(0.0, 0, 0).is_err());
        assert!(PredictionRecord::new(1.0, 0, 0).is_ok());
    }
}
