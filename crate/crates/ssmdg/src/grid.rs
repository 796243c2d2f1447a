//! Fixed ablation grid: the component on/off combinations, the per-module
//! variant presets, and the fused-confidence-only reference, executed as
//! isolated concurrent cells with per-directory outputs.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigFile, SCHEMA_VERSION};
use crate::gating::GateVariant;
use crate::losses::{DarLossKind, ViewSelection};
use crate::trainer::{run_experiment, ExperimentConfig, ExperimentReport, StepMetrics};

/// Every grid cell, in output order: component combinations, per-module
/// variants, and the confidence-only reference.
pub const VARIANTS: &[&str] = &[
    "supervised_only",
    "cdcr_only",
    "dar_only",
    "cdcr_dar",
    "cdcr_cmpa",
    "dar_cmpa",
    "full",
    "mean_cdcr",
    "any2_cdcr",
    "strict_cdcr",
    "full_cdcr",
    "ce_dar",
    "weak_only_dar",
    "strong_only_dar",
    "full_dar",
    "intra_domain_cmpa",
    "intra_modal_cmpa",
    "weak_only_cmpa",
    "strong_only_cmpa",
    "fused_only",
];

#[derive(Debug, Error)]
pub enum GridError {
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("grid io: {0}")]
    Io(#[from] std::io::Error),
    #[error("grid serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Rewrite a base config into one named variant. Idempotent: every preset
/// assigns absolute values.
pub fn apply_variant(cfg: &mut ExperimentConfig, name: &str) -> Result<(), GridError> {
    let set_lambdas = |cfg: &mut ExperimentConfig, cdcr: bool, dar: bool, cmpa: bool| {
        cfg.lambda_cdcr = if cdcr { 1.0 } else { 0.0 };
        cfg.lambda_dar = if dar { 0.1 } else { 0.0 };
        cfg.lambda_cmpa = if cmpa { 0.1 } else { 0.0 };
    };
    match name {
        "supervised_only" => set_lambdas(cfg, false, false, false),
        "cdcr_only" => set_lambdas(cfg, true, false, false),
        "dar_only" => set_lambdas(cfg, false, true, false),
        "cdcr_dar" => set_lambdas(cfg, true, true, false),
        "cdcr_cmpa" => set_lambdas(cfg, true, false, true),
        "dar_cmpa" => set_lambdas(cfg, false, true, true),
        "full" | "full_cdcr" | "full_dar" => {}
        "mean_cdcr" => cfg.gate_variant = GateVariant::Mean,
        "any2_cdcr" => cfg.gate_variant = GateVariant::Any2,
        "strict_cdcr" => cfg.gate_variant = GateVariant::Strict,
        "ce_dar" => cfg.dar_loss = DarLossKind::Ce,
        "weak_only_dar" => cfg.dar_views = ViewSelection::Weak,
        "strong_only_dar" => cfg.dar_views = ViewSelection::Strong,
        "intra_domain_cmpa" => cfg.cmpa_cross_domain = false,
        "intra_modal_cmpa" => cfg.cmpa_translated = false,
        "weak_only_cmpa" => cfg.cmpa_views = ViewSelection::Weak,
        "strong_only_cmpa" => cfg.cmpa_views = ViewSelection::Strong,
        // FixMatch-style reference: fused-confidence gating and the
        // fused-head consistency term only; no unimodal heads in the
        // consistency loss, no disagreement or alignment modules
        "fused_only" => {
            set_lambdas(cfg, true, false, false);
            cfg.gate_variant = GateVariant::FusedOnly;
        }
        other => return Err(GridError::UnknownVariant(other.to_string())),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CellResult {
    pub variant: String,
    /// Error string when the cell failed; its directory then holds
    /// whatever was written before the failure.
    pub error: Option<String>,
    #[serde(skip)]
    pub report: Option<ExperimentReport>,
}

#[derive(Debug)]
pub struct GridOutcome {
    pub cells: Vec<CellResult>,
}

impl GridOutcome {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

/// Serialize one experiment's outputs into `dir`. Wall-clock timing is
/// confined to report.json; everything else is bit-deterministic.
pub fn write_run_outputs(
    dir: &Path,
    resolved: &ConfigFile,
    report: &ExperimentReport,
) -> Result<(), GridError> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("resolved-config.json"),
        serde_json::to_string_pretty(resolved)?,
    )?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let mut csv = fs::File::create(dir.join("metrics.csv"))?;
    writeln!(csv, "{}", StepMetrics::CSV_HEADER)?;
    for run in &report.runs {
        for target in &run.targets {
            for sm in &target.metrics {
                writeln!(csv, "{}", sm.csv_row())?;
            }
        }
    }
    Ok(())
}

/// Execute every grid cell under `out`, up to `jobs` at a time. Partial
/// failures are recorded and the rest of the grid still runs.
pub fn run_grid(
    base: &ExperimentConfig,
    out: &Path,
    jobs: usize,
) -> Result<GridOutcome, GridError> {
    fs::create_dir_all(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let cells: Vec<CellResult> = pool.install(|| {
        VARIANTS
            .par_iter()
            .map(|&name| run_cell(base, out, name))
            .collect()
    });
    let outcome = GridOutcome { cells };
    write_summary(out, base, &outcome)?;
    Ok(outcome)
}

fn run_cell(base: &ExperimentConfig, out: &Path, name: &str) -> CellResult {
    let mut cfg = base.clone();
    if let Err(e) = apply_variant(&mut cfg, name) {
        return CellResult {
            variant: name.to_string(),
            error: Some(e.to_string()),
            report: None,
        };
    }
    let dir = out.join(name);
    let resolved = ConfigFile {
        schema_version: SCHEMA_VERSION,
        output_dir: Some(dir.display().to_string()),
        variant: Some(name.to_string()),
        experiment: cfg.clone(),
    };
    let result = run_experiment(&cfg)
        .map_err(|e| e.to_string())
        .and_then(|report| {
            write_run_outputs(&dir, &resolved, &report)
                .map_err(|e| e.to_string())
                .map(|()| report)
        });
    match result {
        Ok(report) => CellResult {
            variant: name.to_string(),
            error: None,
            report: Some(report),
        },
        Err(e) => CellResult {
            variant: name.to_string(),
            error: Some(e),
            report: None,
        },
    }
}

/// summary.csv: one row per cell per target domain per seed; failed cells
/// are listed in failures.json.
fn write_summary(out: &Path, base: &ExperimentConfig, outcome: &GridOutcome) -> Result<(), GridError> {
    let _ = base;
    let mut csv = fs::File::create(out.join("summary.csv"))?;
    writeln!(csv, "variant,seed,target_domain,accuracy")?;
    for cell in &outcome.cells {
        if let Some(report) = &cell.report {
            for run in &report.runs {
                for target in &run.targets {
                    writeln!(
                        csv,
                        "{},{},{},{}",
                        cell.variant, run.seed, target.target_domain, target.accuracy
                    )?;
                }
            }
        }
    }
    let failures: Vec<&CellResult> =
        outcome.cells.iter().filter(|c| c.error.is_some()).collect();
    fs::write(
        out.join("failures.json"),
        serde_json::to_string_pretty(&failures)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_twenty_named_cells() {
        assert_eq!(VARIANTS.len(), 20);
        // 7 component rows, 12 per-module variants, 1 reference
        let component_rows = &VARIANTS[..7];
        assert!(component_rows.contains(&"supervised_only"));
        assert!(component_rows.contains(&"full"));
        let module_variants = &VARIANTS[7..19];
        assert_eq!(module_variants.len(), 12);
        assert!(VARIANTS.ends_with(&["fused_only"]));
        // all distinct
        let mut names: Vec<_> = VARIANTS.to_vec();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 20);
    }

    #[test]
    fn variants_resolve_to_expected_configs() {
        let base = ExperimentConfig::default();
        let mut cfg = base.clone();
        apply_variant(&mut cfg, "supervised_only").unwrap();
        assert_eq!(
            (cfg.lambda_cdcr, cfg.lambda_dar, cfg.lambda_cmpa),
            (0.0, 0.0, 0.0)
        );
        let mut cfg = base.clone();
        apply_variant(&mut cfg, "cdcr_cmpa").unwrap();
        assert_eq!(
            (cfg.lambda_cdcr, cfg.lambda_dar, cfg.lambda_cmpa),
            (1.0, 0.0, 0.1)
        );
        let mut cfg = base.clone();
        apply_variant(&mut cfg, "strict_cdcr").unwrap();
        assert_eq!(cfg.gate_variant, GateVariant::Strict);
        let mut cfg = base.clone();
        apply_variant(&mut cfg, "intra_modal_cmpa").unwrap();
        assert!(!cfg.cmpa_translated);
        let mut cfg = base.clone();
        apply_variant(&mut cfg, "full_dar").unwrap();
        assert_eq!(cfg, base);
        assert!(apply_variant(&mut cfg, "bogus").is_err());
    }

    #[test]
    fn small_grid_runs_and_writes_every_cell() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            total_steps: 2,
            eval_interval: 2,
            labeled_batch: 4,
            unlabeled_per_domain: 10,
            seeds: vec![0],
            ..ExperimentConfig::default()
        };
        let outcome = run_grid(&cfg, tmp.path(), 4).unwrap();
        assert_eq!(outcome.failed(), 0);
        for name in VARIANTS {
            let dir = tmp.path().join(name);
            assert!(dir.join("resolved-config.json").is_file(), "{name}");
            assert!(dir.join("metrics.csv").is_file(), "{name}");
            assert!(dir.join("report.json").is_file(), "{name}");
        }
        let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
        // header + 20 cells x 1 seed x 3 targets
        assert_eq!(summary.lines().count(), 1 + 20 * 3);
        // resolved config reproduces the run
        let text =
            fs::read_to_string(tmp.path().join("strict_cdcr/resolved-config.json")).unwrap();
        let parsed = crate::config::from_value(serde_json::from_str(&text).unwrap(), &[]).unwrap();
        assert_eq!(parsed.experiment.gate_variant, GateVariant::Strict);
    }

    #[test]
    fn jobs_count_does_not_change_outputs() {
        let cfg = ExperimentConfig {
            total_steps: 2,
            eval_interval: 2,
            labeled_batch: 4,
            unlabeled_per_domain: 10,
            seeds: vec![0],
            ..ExperimentConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_grid(&cfg, a.path(), 1).unwrap();
        run_grid(&cfg, b.path(), 4).unwrap();
        for name in VARIANTS {
            let ma = fs::read(a.path().join(name).join("metrics.csv")).unwrap();
            let mb = fs::read(b.path().join(name).join("metrics.csv")).unwrap();
            assert_eq!(ma, mb, "{name}");
        }
        assert_eq!(
            fs::read(a.path().join("summary.csv")).unwrap(),
            fs::read(b.path().join("summary.csv")).unwrap()
        );
    }
}
