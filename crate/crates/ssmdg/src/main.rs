use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssmdg::config::{load_config, ConfigError, ConfigFile};
use ssmdg::datagen::{export_datasets, make_task, sample_split, LabelBudget};
use ssmdg::diag::run_diag;
use ssmdg::grid::{run_grid, write_run_outputs};
use ssmdg::trainer::{run_experiment, TrainError};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_PARTIAL_GRID: u8 = 4;

#[derive(Parser)]
#[command(name = "ssmdg", version, about = "Semi-supervised multimodal domain generalization benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set gate.variant=strict. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides the config's seed list.
    #[arg(long, value_name = "CSV")]
    seed_list: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write report.json / metrics.csv.
    Run(CommonArgs),
    /// Run the fixed ablation grid, one sub-directory per cell.
    #[command(name = "ablation_grid", alias = "grid")]
    AblationGrid {
        #[command(flatten)]
        common: CommonArgs,
        /// Concurrent grid cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Pre-flight numeric checks: gradient suite, gate oracle, EMA form.
    Diag {
        /// Random fixtures per gradient check.
        #[arg(long, default_value_t = 20)]
        fixtures: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Materialize the synthetic datasets to a binary file + JSON sidecar.
    #[command(name = "export_data")]
    ExportData {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum LogLevel {
    Error,
    Info,
    Debug,
}

fn log_level() -> LogLevel {
    match std::env::var("SSMDG_LOG").as_deref() {
        Ok("debug") => LogLevel::Debug,
        Ok("error") => LogLevel::Error,
        _ => LogLevel::Info,
    }
}

fn log(level: LogLevel, msg: &str) {
    if level <= log_level() {
        eprintln!("{msg}");
    }
}

/// Machine-readable error record on stderr.
fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::json!({ "error": { "kind": kind, "message": message } })
    );
    ExitCode::from(code)
}

fn load(common: &CommonArgs) -> Result<ConfigFile, ConfigError> {
    let mut overrides = common.overrides.clone();
    if let Some(seeds) = &common.seed_list {
        overrides.push(format!("seeds=[{seeds}]"));
    }
    load_config(&common.config, &overrides)
}

fn output_dir(common: &CommonArgs, cfg: &ConfigFile) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn train_error_code(e: &TrainError) -> u8 {
    match e {
        TrainError::NonFiniteLoss { .. } | TrainError::Diff(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn cmd_run(common: &CommonArgs) -> ExitCode {
    let cfg = match load(common) {
        Ok(c) => c,
        Err(e) => return fail("config", &e.to_string(), EXIT_CONFIG),
    };
    let out = output_dir(common, &cfg);
    log(LogLevel::Info, &format!("run: {} seed(s) -> {}", cfg.experiment.seeds.len(), out.display()));
    let report = match run_experiment(&cfg.experiment) {
        Ok(r) => r,
        Err(e) => return fail("train", &e.to_string(), train_error_code(&e)),
    };
    log(
        LogLevel::Info,
        &format!(
            "mean accuracy {:.4} +/- {:.4}",
            report.mean_accuracy, report.std_accuracy
        ),
    );
    match write_run_outputs(&out, &cfg, &report) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail("io", &e.to_string(), EXIT_CONFIG),
    }
}

fn cmd_grid(common: &CommonArgs, jobs: usize) -> ExitCode {
    let cfg = match load(common) {
        Ok(c) => c,
        Err(e) => return fail("config", &e.to_string(), EXIT_CONFIG),
    };
    let out = output_dir(common, &cfg);
    log(LogLevel::Info, &format!("ablation grid -> {} (jobs {jobs})", out.display()));
    match run_grid(&cfg.experiment, &out, jobs) {
        Ok(outcome) => {
            for cell in &outcome.cells {
                match &cell.error {
                    None => log(LogLevel::Debug, &format!("cell {} ok", cell.variant)),
                    Some(e) => log(
                        LogLevel::Error,
                        &format!("cell {} failed: {e}", cell.variant),
                    ),
                }
            }
            if outcome.failed() > 0 {
                fail(
                    "grid",
                    &format!("{} of {} cells failed", outcome.failed(), outcome.cells.len()),
                    EXIT_PARTIAL_GRID,
                )
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => fail("io", &e.to_string(), EXIT_CONFIG),
    }
}

fn cmd_diag(fixtures: usize, seed: u64) -> ExitCode {
    let report = run_diag(fixtures, seed);
    print!("{}", report.render());
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        fail("diag", "one or more checks failed", EXIT_NUMERIC)
    }
}

fn cmd_export(common: &CommonArgs) -> ExitCode {
    let cfg = match load(common) {
        Ok(c) => c,
        Err(e) => return fail("config", &e.to_string(), EXIT_CONFIG),
    };
    let exp = &cfg.experiment;
    let mut spec = exp.task.clone();
    spec.seed = exp.seeds[0];
    let result = make_task(&spec).and_then(|task| {
        sample_split(
            &task,
            LabelBudget::Count(exp.labels_per_class),
            exp.unlabeled_per_domain,
            exp.seeds[0],
        )
        .and_then(|datasets| {
            let out = output_dir(common, &cfg).join("datasets.bin");
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir).map_err(ssmdg::datagen::DataError::Io)?;
            }
            export_datasets(&out, &spec, &datasets)?;
            log(LogLevel::Info, &format!("wrote {}", out.display()));
            Ok(())
        })
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail("data", &e.to_string(), EXIT_CONFIG),
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(common) => cmd_run(&common),
        Command::AblationGrid { common, jobs } => cmd_grid(&common, jobs),
        Command::Diag { fixtures, seed } => cmd_diag(fixtures, seed),
        Command::ExportData { common } => cmd_export(&common),
    }
}
