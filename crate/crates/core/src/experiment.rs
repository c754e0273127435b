//! Config-driven runs: train, evaluate, persist, compare.
//!
//! A run directory `<out_dir>/<run_id>/` holds `manifest.json` (written
//! first), `model.lakt`, `epochs.csv`, `report.json` and `report.csv`. The
//! run id is a hash of the canonical config, so identical configs map to the
//! same directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{attack, AttackConfig, AttackFamily, LogitMode, EVAL_PGD_STEPS};
use crate::augment::{apply_corruption, stack, Corruption, CorruptionSpec};
use crate::data::{self, sequential_batches, CifarVariant, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    calibration_errors, corruption_errors, error_rate, AttackResult, BinMode, CalibrationResult, CorruptionResult,
    EvalReport, PredictionRecord, DEFAULT_BINS, REPORT_SCHEMA_VERSION, SEVERITY_COUNT,
};
use crate::nn::{Arch, Model, ModelConfig};
use crate::seed::{self, stream};
use crate::tensor::{checkpoint, Tensor};
use crate::train::{epoch_log_csv, train_with_observer, EpochLog, Regime, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.lakt";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DataSource,
    /// Directory with the uncompressed CIFAR `.bin` archives.
    pub dir: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    /// Number of shape classes for the synthetic source.
    pub classes: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Cifar10,
            dir: None,
            train_size: 5000,
            test_size: 2000,
            classes: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: Arch,
    /// Layer widths; the architecture's default when absent.
    pub hidden: Option<Vec<usize>>,
    /// Two-head model; follows the regime when absent.
    pub multitask: Option<bool>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::SmallCnn,
            hidden: None,
            multitask: None,
        }
    }
}

/// One evaluation attack. Unset fields take the family defaults: PGD runs 40
/// steps of size `epsilon / 4` from a random start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub steps: Option<usize>,
    pub step_size: Option<f64>,
    pub random_start: Option<bool>,
    pub logit_mode: Option<LogitMode>,
}

impl AttackSpec {
    pub fn new(family: AttackFamily, epsilon: f64) -> Self {
        Self {
            family,
            epsilon,
            steps: None,
            step_size: None,
            random_start: None,
            logit_mode: None,
        }
    }

    pub fn resolve(&self) -> AttackConfig {
        let mut cfg = match self.family {
            AttackFamily::Fgsm => AttackConfig::fgsm(self.epsilon),
            AttackFamily::Pgd => AttackConfig::pgd(self.epsilon, EVAL_PGD_STEPS),
        };
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(a) = self.step_size {
            cfg.step_size = a;
        }
        if let Some(r) = self.random_start {
            cfg.random_start = r;
        }
        if let Some(m) = self.logit_mode {
            cfg.logit_mode = m;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub corruptions: Vec<Corruption>,
    pub attacks: Vec<AttackSpec>,
    pub calibration_bins: usize,
    pub calibration_mode: BinMode,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let attacks = [AttackFamily::Fgsm, AttackFamily::Pgd]
            .into_iter()
            .flat_map(|f| [0.03, 0.3].map(|e| AttackSpec::new(f, e)))
            .collect();
        Self {
            corruptions: Corruption::ALL.to_vec(),
            attacks,
            calibration_bins: DEFAULT_BINS,
            calibration_mode: BinMode::EqualCount,
            batch_size: 250,
        }
    }
}

impl EvalSection {
    pub fn validate(&self) -> Result<()> {
        if self.calibration_bins == 0 {
            return Err(Error::config("calibration_bins must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("eval batch_size must be >= 1"));
        }
        let mut keys = BTreeSet::new();
        for a in &self.attacks {
            let cfg = a.resolve();
            cfg.validate()?;
            if !keys.insert(cfg.key()) {
                return Err(Error::config(format!("attack `{}` listed twice", cfg.key())));
            }
        }
        let unique: BTreeSet<_> = self.corruptions.iter().collect();
        if unique.len() != self.corruptions.len() {
            return Err(Error::config("a corruption is listed twice"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_name: String,
    #[serde(default)]
    pub seed: u64,
    /// Parent of the run directory; not part of the run id.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(s) = overrides.seed {
            self.seed = s;
            self.train.seed = s;
        }
        if let Some(o) = &overrides.out_dir {
            self.out_dir = o.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_name.trim().is_empty() {
            return Err(Error::config("run_name must not be empty"));
        }
        self.train.validate()?;
        self.eval.validate()?;
        let d = &self.dataset;
        if d.train_size == 0 || d.test_size == 0 {
            return Err(Error::config("train_size and test_size must be >= 1"));
        }
        if d.source != DataSource::Synthetic && d.dir.is_none() {
            return Err(Error::config("dataset.dir is required for CIFAR sources"));
        }
        if d.source == DataSource::Synthetic && !(2..=data::MAX_SHAPES).contains(&d.classes) {
            return Err(Error::config(format!(
                "dataset.classes must be in 2..={}",
                data::MAX_SHAPES
            )));
        }
        let model = self.model_config(self.num_classes())?;
        model.validate()?;
        self.train.check_model(&model)
    }

    pub fn num_classes(&self) -> usize {
        match self.dataset.source {
            DataSource::Synthetic => self.dataset.classes,
            DataSource::Cifar10 => 10,
            DataSource::Cifar100 => 100,
        }
    }

    /// Model built from the model section, the operation list and the regime.
    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(self.model.arch, num_classes, self.train.ops.len());
        if let Some(h) = &self.model.hidden {
            m.hidden = h.clone();
        }
        m.multitask = self.model.multitask.unwrap_or(self.train.regime == Regime::Mtl);
        m.init_seed = self.seed;
        Ok(m)
    }

    /// Canonical JSON of everything that defines the run.
    pub fn canonical_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(serde_json::to_string(&c)?)
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn run_id(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(digest[..8].iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        }))
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.out_dir.join(self.run_id()?))
    }
}

/// Training and test sets named by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    match d.source {
        DataSource::Synthetic => Ok((
            data::synthesize_shapes(d.train_size, d.classes, seed::derive(&[cfg.seed, 1]))?,
            data::synthesize_shapes(d.test_size, d.classes, seed::derive(&[cfg.seed, 2]))?,
        )),
        DataSource::Cifar10 | DataSource::Cifar100 => {
            let variant = if d.source == DataSource::Cifar10 {
                CifarVariant::Cifar10
            } else {
                CifarVariant::Cifar100Fine
            };
            let dir = d.dir.as_ref().expect("validated");
            if !dir.is_dir() {
                return Err(Error::Data {
                    path: dir.clone(),
                    reason: "dataset directory not found".into(),
                });
            }
            let pick = |split: Split, n: usize, stream_id: u64| -> Result<Dataset> {
                let full = data::load_cifar_split(dir, variant, split)?;
                if n >= full.len() {
                    Ok(full)
                } else {
                    data::subset(&full, n, seed::derive(&[cfg.seed, stream::SUBSET, stream_id]))
                }
            };
            Ok((pick(Split::Train, d.train_size, 0)?, pick(Split::Test, d.test_size, 1)?))
        }
    }
}

fn predict_all(model: &Model, images: &Tensor, batch: usize) -> Result<(Vec<usize>, Vec<f32>)> {
    let (mut classes, mut conf) = (Vec::new(), Vec::new());
    for idx in sequential_batches(images.rows(), batch) {
        let p = model.predict(&images.select_rows(&idx))?;
        conf.extend(p.confidences());
        classes.extend(p.classes);
    }
    Ok((classes, conf))
}

/// Clean error and calibration on the test set.
pub fn clean_eval(model: &Model, test: &Dataset, eval: &EvalSection) -> Result<(f64, CalibrationResult)> {
    let (preds, conf) = predict_all(model, &test.images, eval.batch_size)?;
    let records = preds
        .iter()
        .zip(&conf)
        .zip(&test.labels)
        .map(|((&p, &c), &y)| PredictionRecord::new(c as f64, p, y))
        .collect::<Result<Vec<_>>>()?;
    let cal = calibration_errors(&records, eval.calibration_bins, eval.calibration_mode)?;
    Ok((
        error_rate(&preds, &test.labels)?,
        CalibrationResult {
            bins: eval.calibration_bins,
            mode: eval.calibration_mode,
            ece: 100.0 * cal.ece,
            rms: 100.0 * cal.rms,
        },
    ))
}

/// The test set under one corruption, each image with its own seed.
pub fn corrupt_dataset(test: &Dataset, spec: CorruptionSpec, run_seed: u64) -> Result<Tensor> {
    let c_idx = Corruption::ALL
        .iter()
        .position(|&c| c == spec.corruption)
        .expect("every corruption is listed") as u64;
    let images = (0..test.len())
        .map(|i| {
            let s = seed::derive(&[run_seed, stream::CORRUPT, c_idx, spec.severity() as u64, i as u64]);
            apply_corruption(&test.image(i), spec, s)
        })
        .collect::<Result<Vec<_>>>()?;
    stack(&images)
}

/// Error at every severity of every configured corruption.
pub fn corruption_sweep(
    model: &Model,
    test: &Dataset,
    eval: &EvalSection,
    run_seed: u64,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for &c in &eval.corruptions {
        let mut errors = Vec::with_capacity(SEVERITY_COUNT);
        for s in 1..=SEVERITY_COUNT as u8 {
            let images = corrupt_dataset(test, CorruptionSpec::new(c, s)?, run_seed)?;
            let (preds, _) = predict_all(model, &images, eval.batch_size)?;
            errors.push(error_rate(&preds, &test.labels)?);
        }
        out.insert(c.name().to_owned(), errors);
    }
    Ok(out)
}

/// Adversarial examples for the whole test set, batch by batch.
pub fn adversarial_dataset(
    model: &Model,
    test: &Dataset,
    cfg: &AttackConfig,
    batch: usize,
    run_seed: u64,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(test.images.len());
    for (b, idx) in sequential_batches(test.len(), batch).iter().enumerate() {
        let (x, y) = test.batch(idx);
        let s = seed::derive(&[run_seed, stream::ATTACK, b as u64]);
        data.extend(attack(model, &x, &y, cfg, s)?.adversarial.into_data());
    }
    Tensor::new(test.images.shape().to_vec(), data)
}

pub fn attack_error(model: &Model, test: &Dataset, cfg: &AttackConfig, batch: usize, run_seed: u64) -> Result<f64> {
    let adv = adversarial_dataset(model, test, cfg, batch, run_seed)?;
    let (preds, _) = predict_all(model, &adv, batch)?;
    error_rate(&preds, &test.labels)
}

/// Clean, corruption, calibration and attack metrics for one model.
pub fn evaluate(model: &Model, test: &Dataset, eval: &EvalSection, run_seed: u64) -> Result<EvalReport> {
    eval.validate()?;
    let (clean_error, calibration) = clean_eval(model, test, eval)?;
    let sweep = corruption_sweep(model, test, eval, run_seed)?;
    let (corruptions, mce) = if sweep.is_empty() {
        (BTreeMap::new(), None)
    } else {
        let (ce, mce) = corruption_errors(&sweep)?;
        let merged = sweep
            .into_iter()
            .map(|(name, severity_errors)| {
                let ce = ce[&name];
                (name, CorruptionResult { severity_errors, ce })
            })
            .collect();
        (merged, Some(mce))
    };
    let mut attacks = BTreeMap::new();
    for spec in &eval.attacks {
        let cfg = spec.resolve();
        let err = attack_error(model, test, &cfg, eval.batch_size, run_seed)?;
        attacks.insert(cfg.key(), AttackResult::new(&cfg, err));
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        test_samples: test.len(),
        clean_error,
        corruptions,
        mce,
        calibration,
        attacks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub run_name: String,
    pub toolkit_version: String,
    pub status: String,
    pub config: ExperimentConfig,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
    /// File names relative to the run directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig, artifacts: &[&str]) -> Result<Self> {
        Ok(Self {
            run_id: cfg.run_id()?,
            run_name: cfg.run_name.clone(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_owned(),
            status: "running".into(),
            config: cfg.clone(),
            timings: BTreeMap::new(),
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self> {
        let path = run_dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Data {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let mut manifest: Self = serde_json::from_str(&text)?;
        manifest.config.train.seed = manifest.config.seed;
        Ok(manifest)
    }

    fn write(&self, run_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(run_dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// Creates the run directory, refusing to reuse a populated one unless
/// `force` is set.
fn prepare_run_dir(cfg: &ExperimentConfig, force: bool) -> Result<PathBuf> {
    let dir = cfg.run_dir()?;
    if dir.join(MANIFEST_FILE).exists() {
        if !force {
            return Err(Error::Exists(dir));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub log: Vec<EpochLog>,
    pub report: Option<EvalReport>,
}

fn train_into(
    cfg: &ExperimentConfig,
    dir: &Path,
    train_set: &Dataset,
    manifest: &mut RunManifest,
) -> Result<(Model, Vec<EpochLog>)> {
    let start = Instant::now();
    let model_cfg = cfg.model_config(train_set.num_classes)?;
    let outcome = train_with_observer(&cfg.train, &model_cfg, train_set, |_, _| Ok(()))?;
    checkpoint::save(dir.join(CHECKPOINT_FILE), outcome.model.params())?;
    std::fs::write(dir.join(EPOCH_LOG_FILE), epoch_log_csv(&outcome.log))?;
    manifest.timings.insert("train".into(), start.elapsed().as_secs_f64());
    Ok((outcome.model, outcome.log))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(dir.join(REPORT_JSON_FILE), report.to_json()?)?;
    std::fs::write(dir.join(REPORT_CSV_FILE), report.to_csv())?;
    Ok(())
}

/// Trains, evaluates and writes every artifact of a run.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let (train_set, test_set) = load_datasets(cfg)?;
    let dir = prepare_run_dir(cfg, force)?;
    let mut manifest = RunManifest::new(
        cfg,
        &[
            MANIFEST_FILE,
            CHECKPOINT_FILE,
            EPOCH_LOG_FILE,
            REPORT_JSON_FILE,
            REPORT_CSV_FILE,
        ],
    )?;
    manifest.write(&dir)?;
    let (model, log) = train_into(cfg, &dir, &train_set, &mut manifest)?;
    let start = Instant::now();
    let report = evaluate(&model, &test_set, &cfg.eval, cfg.seed)?;
    write_report(&dir, &report)?;
    manifest
        .timings
        .insert("evaluate".into(), start.elapsed().as_secs_f64());
    manifest.status = "complete".into();
    manifest.write(&dir)?;
    Ok(RunSummary {
        run_dir: dir,
        manifest,
        log,
        report: Some(report),
    })
}

/// Training stage only: manifest, checkpoint and epoch log.
pub fn run_training(cfg: &ExperimentConfig, force: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let (train_set, _) = load_datasets(cfg)?;
    let dir = prepare_run_dir(cfg, force)?;
    let mut manifest = RunManifest::new(cfg, &[MANIFEST_FILE, CHECKPOINT_FILE, EPOCH_LOG_FILE])?;
    manifest.write(&dir)?;
    let (_, log) = train_into(cfg, &dir, &train_set, &mut manifest)?;
    manifest.status = "trained".into();
    manifest.write(&dir)?;
    Ok(RunSummary {
        run_dir: dir,
        manifest,
        log,
        report: None,
    })
}

/// Restores the model saved in a run directory.
pub fn load_run_model(run_dir: impl AsRef<Path>) -> Result<(RunManifest, Model)> {
    let run_dir = run_dir.as_ref();
    let manifest = RunManifest::load(run_dir)?;
    let cfg = &manifest.config;
    let records = checkpoint::load(run_dir.join(CHECKPOINT_FILE))?;
    let model = Model::from_records(cfg.model_config(cfg.num_classes())?, records)?;
    Ok((manifest, model))
}

/// Evaluates a trained run and adds the report files to it.
pub fn run_evaluation(run_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let run_dir = run_dir.as_ref();
    let (mut manifest, model) = load_run_model(run_dir)?;
    let cfg = manifest.config.clone();
    let (_, test_set) = load_datasets(&cfg)?;
    let start = Instant::now();
    let report = evaluate(&model, &test_set, &cfg.eval, cfg.seed)?;
    for f in [REPORT_JSON_FILE, REPORT_CSV_FILE] {
        if !manifest.artifacts.iter().any(|a| a == f) {
            manifest.artifacts.push(f.to_owned());
        }
    }
    manifest
        .timings
        .insert("evaluate".into(), start.elapsed().as_secs_f64());
    manifest.status = "complete".into();
    manifest.write(run_dir)?;
    write_report(run_dir, &report)?;
    Ok(report)
}

pub fn load_report(run_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let path = run_dir.as_ref().join(REPORT_JSON_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Data {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    EvalReport::from_json(&text)
}

/// `100 * (x - baseline) / baseline`; negative means fewer errors.
pub fn percent_change(x: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 {
        (x == 0.0).then_some(0.0)
    } else {
        Some(100.0 * (x - baseline) / baseline)
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Metric-by-run table: one row per metric, one column per run, then the
/// percent change of every later run against the first.
pub fn compare_reports(names: &[String], reports: &[EvalReport]) -> Result<String> {
    if reports.len() < 2 || names.len() != reports.len() {
        return Err(Error::validation("compare needs at least two runs"));
    }
    let rows: Vec<Vec<(String, Option<f64>)>> = reports.iter().map(EvalReport::metric_rows).collect();
    let labels: Vec<&String> = rows[0].iter().map(|(l, _)| l).collect();
    for (r, name) in rows.iter().zip(names).skip(1) {
        let other: Vec<&String> = r.iter().map(|(l, _)| l).collect();
        if other != labels {
            return Err(Error::Incompatible(format!(
                "run `{name}` reports {other:?}, baseline reports {labels:?}"
            )));
        }
    }
    let cal = &reports[0].calibration;
    if reports
        .iter()
        .any(|r| (r.calibration.bins, r.calibration.mode) != (cal.bins, cal.mode))
    {
        return Err(Error::Incompatible("calibration binning differs between runs".into()));
    }
    let settings = |r: &EvalReport| -> BTreeMap<String, AttackResult> {
        r.attacks
            .iter()
            .map(|(k, a)| {
                (
                    k.clone(),
                    AttackResult {
                        error: 0.0,
                        ..a.clone()
                    },
                )
            })
            .collect()
    };
    if reports.iter().any(|r| settings(r) != settings(&reports[0])) {
        return Err(Error::Incompatible("attack settings differ between runs".into()));
    }

    let mut out = String::from("metric");
    for n in names {
        write!(out, ",{n}").unwrap();
    }
    for n in &names[1..] {
        write!(out, ",{n}_pct_change").unwrap();
    }
    out.push('\n');
    for (i, label) in labels.iter().enumerate() {
        out.push_str(label);
        for r in &rows {
            write!(out, ",{}", fmt_cell(r[i].1)).unwrap();
        }
        let base = rows[0][i].1;
        for r in &rows[1..] {
            let pct = match (r[i].1, base) {
                (Some(x), Some(b)) => percent_change(x, b),
                _ => None,
            };
            write!(out, ",{}", fmt_cell(pct)).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Loads `report.json` from each run directory and tabulates them, naming
/// columns by run name (falling back to the directory name).
pub fn compare_runs(run_dirs: &[PathBuf]) -> Result<String> {
    let mut names = Vec::new();
    let mut reports = Vec::new();
    for dir in run_dirs {
        let name = RunManifest::load(dir).map(|m| m.run_name).unwrap_or_else(|_| {
            dir.file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        let mut unique = name.clone();
        let mut k = 2;
        while names.contains(&unique) {
            unique = format!("{name}_{k}");
            k += 1;
        }
        names.push(unique);
        reports.push(load_report(dir)?);
    }
    compare_reports(&names, &reports)
}
