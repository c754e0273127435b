use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use labaug::attacks::{AttackFamily, LogitMode};
use labaug::augment::{Corruption, CorruptionSpec};
use labaug::experiment::{self, AttackSpec, ExperimentConfig, Overrides, RunSummary};
use labaug::metrics::EvalReport;
use labaug::tensor::checkpoint::{self, NamedTensor};
use labaug::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "labaug", version, about = "Label-augmentation robustness experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> labaug::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            out_dir: self.out.clone(),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Selects an existing run either by directory or by the config that made it.
#[derive(Args, Clone)]
struct RunArgs {
    /// Run directory.
    #[arg(long, conflicts_with = "config")]
    run: Option<PathBuf>,
    #[arg(long, required_unless_present = "run")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn run_dir(&self) -> labaug::Result<PathBuf> {
        if let Some(r) = &self.run {
            return Ok(r.clone());
        }
        let args = ConfigArgs {
            config: self.config.clone().expect("clap enforces --config or --run"),
            seed: self.seed,
            out: self.out.clone(),
        };
        args.load()?.run_dir()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and write every artifact of a run.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Replace an existing run with the same id.
        #[arg(long)]
        force: bool,
    },
    /// Train only: manifest, checkpoint and epoch log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a trained run and write its report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Attack a trained run's model on its test set.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_family)]
        family: AttackFamily,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        /// Start PGD at the clean input.
        #[arg(long)]
        no_random_start: bool,
        #[arg(long, value_parser = parse_logit_mode)]
        logit_mode: Option<LogitMode>,
        /// Write the adversarial test set as a raw tensor file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Corrupt the configured test set and dump it as a raw tensor file.
    Corrupt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = parse_corruption)]
        corruption: Corruption,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
        severity: u8,
        #[arg(long)]
        dump: PathBuf,
    },
    /// Print a run's headline metrics.
    Report {
        #[command(flatten)]
        run: RunArgs,
        /// Print the flat CSV row instead of the table.
        #[arg(long)]
        csv: bool,
    },
    /// Compare finished runs metric by metric.
    Compare {
        /// Run directories; the first is the baseline.
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_family(s: &str) -> Result<AttackFamily, String> {
    match s {
        "fgsm" => Ok(AttackFamily::Fgsm),
        "pgd" => Ok(AttackFamily::Pgd),
        _ => Err(format!("unknown attack `{s}` (fgsm or pgd)")),
    }
}

fn parse_logit_mode(s: &str) -> Result<LogitMode, String> {
    match s {
        "masked_k" => Ok(LogitMode::MaskedK),
        "full_km" => Ok(LogitMode::FullKm),
        _ => Err(format!("unknown logit mode `{s}` (masked_k or full_km)")),
    }
}

fn parse_corruption(s: &str) -> Result<Corruption, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data { .. } | Error::Format(_) | Error::Json(_) => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

fn print_table(report: &EvalReport) {
    for (label, value) in report.metric_rows() {
        match value {
            Some(v) => println!("{label:<12} {v:>8.2}"),
            None => println!("{label:<12} {:>8}", "-"),
        }
    }
}

fn print_summary(summary: &RunSummary) {
    println!("run {} ({})", summary.manifest.run_id, summary.manifest.run_name);
    println!("dir {}", summary.run_dir.display());
    if let Some(last) = summary.log.last() {
        println!(
            "epoch {} loss {:.4} train accuracy {:.2}%",
            last.epoch, last.mean_loss, last.train_accuracy
        );
    }
    if let Some(report) = &summary.report {
        print_table(report);
    }
}

fn dump(path: &Path, name: &str, tensor: labaug::Tensor<f32>) -> labaug::Result<()> {
    checkpoint::save(
        path,
        &[NamedTensor {
            name: name.to_owned(),
            tensor,
        }],
    )
}

fn execute(command: Command) -> labaug::Result<()> {
    match command {
        Command::Run { cfg, force } => print_summary(&experiment::run_experiment(&cfg.load()?, force)?),
        Command::Train { cfg, force } => print_summary(&experiment::run_training(&cfg.load()?, force)?),
        Command::Eval { run } => print_table(&experiment::run_evaluation(run.run_dir()?)?),
        Command::Attack {
            run,
            family,
            epsilon,
            steps,
            step_size,
            no_random_start,
            logit_mode,
            dump: dump_path,
        } => {
            let (manifest, model) = experiment::load_run_model(run.run_dir()?)?;
            let cfg = &manifest.config;
            let spec = AttackSpec {
                family,
                epsilon,
                steps,
                step_size,
                random_start: no_random_start.then_some(false),
                logit_mode,
            };
            let attack = spec.resolve();
            attack.validate()?;
            let (_, test) = experiment::load_datasets(cfg)?;
            let adv = experiment::adversarial_dataset(&model, &test, &attack, cfg.eval.batch_size, cfg.seed)?;
            let preds = model.predict(&adv)?;
            let err = labaug::metrics::error_rate(&preds.classes, &test.labels)?;
            println!(
                "{} steps={} step_size={} random_start={} error {err:.2}",
                attack.key(),
                attack.steps,
                attack.step_size,
                attack.random_start
            );
            if let Some(p) = dump_path {
                dump(&p, &attack.key(), adv)?;
            }
        }
        Command::Corrupt {
            cfg,
            corruption,
            severity,
            dump: dump_path,
        } => {
            let cfg = cfg.load()?;
            let (_, test) = experiment::load_datasets(&cfg)?;
            let spec = CorruptionSpec::new(corruption, severity)?;
            let images = experiment::corrupt_dataset(&test, spec, cfg.seed)?;
            let n = images.rows();
            dump(&dump_path, &format!("{corruption}_s{severity}"), images)?;
            println!("wrote {n} images to {}", dump_path.display());
        }
        Command::Report { run, csv } => {
            let report = experiment::load_report(run.run_dir()?)?;
            if csv {
                print!("{}", report.to_csv());
            } else {
                print_table(&report);
            }
        }
        Command::Compare { runs, out } => {
            let table = experiment::compare_runs(&runs)?;
            match out {
                Some(p) => std::fs::write(p, table)?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
