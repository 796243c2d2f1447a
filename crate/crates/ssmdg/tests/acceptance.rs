//! End-to-end acceptance suite. Each test prints a single PASS/FAIL line
//! for its criterion; the slow statistical checks share one cached
//! full-method experiment. Run with `--nocapture` to see the lines for
//! passing criteria too.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ssmdg::diag::run_diag;
use ssmdg::diffcore::{Tape, Tensor};
use ssmdg::gating::{self, oracle, GateVariant};
use ssmdg::grid::{apply_variant, run_grid, VARIANTS};
use ssmdg::losses::{align_pair, cross_entropy, gce, LossBuilder, ViewSelection};
use ssmdg::prototypes::{cmpa_sum, CmpaSwitches, PrototypeBank, SubsetFeatures};
use ssmdg::trainer::{run_experiment, ExperimentConfig, ExperimentReport};

fn verdict(name: &str, passed: bool, detail: &str) {
    println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "{name}: {detail}");
}

fn five_seed_config() -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![0, 1, 2, 3, 4],
        ..ExperimentConfig::default()
    }
}

/// The default-task full-method run, shared by the criteria that inspect
/// it from different angles.
fn full_method_report() -> &'static ExperimentReport {
    static REPORT: OnceLock<ExperimentReport> = OnceLock::new();
    REPORT.get_or_init(|| run_experiment(&five_seed_config()).expect("full method run"))
}

#[test]
fn gradient_suite() {
    let started = Instant::now();
    let report = run_diag(20, 0);
    let elapsed = report_elapsed(started);
    let grads: Vec<_> = report
        .checks
        .iter()
        .filter(|c| c.name.starts_with("grad_"))
        .collect();
    let max_err = grads
        .iter()
        .filter_map(|c| c.max_error)
        .fold(0.0f64, f64::max);
    let passed =
        grads.len() == 5 && grads.iter().all(|c| c.passed) && max_err < 1e-4 && elapsed < 60.0;
    verdict(
        "gradient_suite",
        passed,
        &format!("5 loss terms x 20 fixtures, max_relative_error={max_err:.3e}, {elapsed:.1}s (limit 60s)"),
    );
}

fn report_elapsed(started: Instant) -> f64 {
    started.elapsed().as_secs_f64()
}

#[test]
fn gate_oracle() {
    let started = Instant::now();
    let variants = [
        GateVariant::Full,
        GateVariant::Mean,
        GateVariant::Any2,
        GateVariant::Strict,
        GateVariant::FusedOnly,
    ];
    let grid = oracle::exhaustive_grid(2);
    let mut cases = 0usize;
    let mut disagreements = 0usize;
    for tau in [0.92, 0.95] {
        for &variant in &variants {
            for probs in &grid {
                cases += 1;
                let got = gating::gate_sample(probs, tau, variant).expect("grid entry");
                if got != oracle::gate_sample(probs, tau, variant) {
                    disagreements += 1;
                }
            }
        }
    }
    let elapsed = report_elapsed(started);
    let passed = disagreements == 0 && elapsed < 5.0;
    verdict(
        "gate_oracle",
        passed,
        &format!("{cases} cases, {disagreements} disagreements, {elapsed:.2}s (limit 5s)"),
    );
}

#[test]
fn gce_analytics() {
    // hand-derived: (1 - 0.9^0.7) / 0.7 = 0.10156900330661285
    let probs = |p: f64| vec![p, 1.0 - p];
    let anchor = gce(0, &probs(0.9), 0.7).unwrap();
    let anchor_ok = (anchor - 0.101569).abs() < 1e-6;

    // q = 1 degenerates to 1 - p exactly
    let q1_ok = [0.1, 0.5, 0.9, 0.99]
        .iter()
        .all(|&p| gce(0, &probs(p), 1.0).unwrap() == 1.0 - p);

    // q -> 0 approaches cross-entropy
    let ce_ok = [0.1, 0.5, 0.9, 0.99].iter().all(|&p| {
        (gce(0, &probs(p), 1e-3).unwrap() - cross_entropy(0, &probs(p)).unwrap()).abs() < 5e-3
    });

    // monotone decreasing in p on a 100-point grid
    let grid: Vec<f64> = (1..=100).map(|i| i as f64 / 101.0).collect();
    let mono_ok = grid
        .windows(2)
        .all(|w| gce(0, &probs(w[1]), 0.7).unwrap() < gce(0, &probs(w[0]), 0.7).unwrap());

    verdict(
        "gce_analytics",
        anchor_ok && q1_ok && ce_ok && mono_ok,
        &format!(
            "gce(0.9,0.7)={anchor:.9}, q=1 exact={q1_ok}, q->0 matches CE={ce_ok}, monotone={mono_ok}"
        ),
    );
}

#[test]
fn ema_closed_form() {
    let mut max_err: f64 = 0.0;
    for alpha in [0.5, 0.9, 0.99] {
        let mut bank = PrototypeBank::new(1, 1, 1, vec![3], alpha);
        let mu0 = vec![1.5, -2.0, 0.25];
        let b = vec![-0.5, 0.75, 3.0];
        bank.ema_update(&[(0, 0, 0, mu0.clone())]).unwrap();
        let n = 10;
        for _ in 0..n {
            bank.ema_update(&[(0, 0, 0, b.clone())]).unwrap();
        }
        let an = alpha.powi(n);
        for (got, (&m0, &bi)) in bank.get(0, 0, 0).unwrap().iter().zip(mu0.iter().zip(&b)) {
            max_err = max_err.max((got - (an * m0 + (1.0 - an) * bi)).abs());
        }
    }
    verdict(
        "ema_closed_form",
        max_err < 1e-10,
        &format!("n=10, alpha in {{0.5, 0.9, 0.99}}, max_abs_error={max_err:.3e} (tol 1e-10)"),
    );
}

fn ssmdg_bin() -> &'static str {
    env!("CARGO_BIN_EXE_ssmdg")
}

fn write_base_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("base.json");
    std::fs::write(&path, "{\"schema_version\": 1}\n").unwrap();
    path
}

const SMALL_OVERRIDES: &[&str] = &[
    "total_steps=20",
    "eval_interval=10",
    "labeled_batch=8",
    "unlabeled_per_domain=30",
    "seeds=[0,1]",
];

fn run_cli(args: &[&str]) {
    let out = Command::new(ssmdg_bin()).args(args).output().expect("spawn ssmdg");
    assert!(
        out.status.success(),
        "ssmdg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let base = write_base_config(tmp.path());
    let base = base.to_str().unwrap();
    let run_args = |out: &Path, sub: &str, extra: &[&str]| {
        let mut args = vec![sub, "--config", base];
        for s in SMALL_OVERRIDES {
            args.push("--set");
            args.push(s);
        }
        args.extend_from_slice(extra);
        args.push("--out");
        args.push(out.to_str().unwrap());
        run_cli(&args);
    };

    // identical config + seed => byte-identical metrics.csv
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_args(&a, "run", &[]);
    run_args(&b, "run", &[]);
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    let mb = std::fs::read(b.join("metrics.csv")).unwrap();
    let rerun_ok = ma == mb;

    // --jobs 1 and --jobs 4 => identical per-cell outputs
    let (g1, g4) = (tmp.path().join("g1"), tmp.path().join("g4"));
    run_args(&g1, "ablation_grid", &["--jobs", "1"]);
    run_args(&g4, "ablation_grid", &["--jobs", "4"]);
    let cells_ok = VARIANTS.iter().all(|name| {
        std::fs::read(g1.join(name).join("metrics.csv")).unwrap()
            == std::fs::read(g4.join(name).join("metrics.csv")).unwrap()
    }) && std::fs::read(g1.join("summary.csv")).unwrap()
        == std::fs::read(g4.join("summary.csv")).unwrap();

    verdict(
        "determinism",
        rerun_ok && cells_ok,
        &format!(
            "rerun metrics.csv identical={rerun_ok}, jobs 1 vs 4 cell outputs identical={cells_ok}"
        ),
    );
}

#[test]
fn generalization_smoke() {
    let full = full_method_report();
    let mut sup_cfg = five_seed_config();
    apply_variant(&mut sup_cfg, "supervised_only").unwrap();
    let sup = run_experiment(&sup_cfg).expect("supervised-only run");
    let mut fm_cfg = five_seed_config();
    apply_variant(&mut fm_cfg, "fused_only").unwrap();
    let fused = run_experiment(&fm_cfg).expect("fused-only run");

    let slowest = full
        .runs
        .iter()
        .chain(&sup.runs)
        .chain(&fused.runs)
        .map(|r| r.wall_clock_secs)
        .fold(0.0f64, f64::max);
    let margin = full.mean_accuracy - sup.mean_accuracy;
    let passed =
        margin >= 0.05 && full.mean_accuracy > fused.mean_accuracy && slowest < 30.0 * 60.0;
    verdict(
        "generalization_smoke",
        passed,
        &format!(
            "full={:.4} supervised_only={:.4} (margin {:+.4}, need >= +0.05) fused_only={:.4}, slowest run {:.0}s (limit 1800s)",
            full.mean_accuracy, sup.mean_accuracy, margin, fused.mean_accuracy, slowest
        ),
    );
}

#[test]
fn missing_modality_ordering() {
    let mut cfg = five_seed_config();
    cfg.task.modality_correlation = 0.8;
    cfg.eval_missing = true;
    let report = run_experiment(&cfg).expect("missing-modality run");
    let mean_for = |key: &str| {
        let vals: Vec<f64> = report
            .runs
            .iter()
            .flat_map(|r| &r.targets)
            .map(|t| t.missing_accuracy[key])
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let mut detail = String::new();
    let mut passed = true;
    for m in 0..cfg.model.num_modalities {
        let tr = mean_for(&format!("m{m}_translate"));
        let ze = mean_for(&format!("m{m}_zero"));
        passed &= tr >= ze;
        detail.push_str(&format!("m{m}: translate={tr:.4} zero={ze:.4}; "));
    }
    verdict("missing_modality_ordering", passed, detail.trim_end());
}

#[test]
fn filtering_precision() {
    let report = full_method_report();
    let warmup = (ExperimentConfig::default().total_steps * 3) / 10;
    let (mut cons_sum, mut cons_n) = (0.0, 0usize);
    let (mut dis_sum, mut dis_n) = (0.0, 0usize);
    for run in &report.runs {
        for target in &run.targets {
            for sm in target.metrics.iter().filter(|sm| sm.step >= warmup) {
                if let Some(v) = sm.pl_accuracy_consensus {
                    cons_sum += v;
                    cons_n += 1;
                }
                if let Some(v) = sm.pl_accuracy_disagreement {
                    dis_sum += v;
                    dis_n += 1;
                }
            }
        }
    }
    let cons = cons_sum / cons_n.max(1) as f64;
    let dis = dis_sum / dis_n.max(1) as f64;
    let passed = cons_n > 0 && dis_n > 0 && cons >= dis;
    verdict(
        "filtering_precision",
        passed,
        &format!(
            "post-warm-up pl_accuracy: consensus={cons:.4} ({cons_n} steps) >= disagreement={dis:.4} ({dis_n} steps)"
        ),
    );
}

#[test]
fn ablation_grid_integrity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        total_steps: 10,
        eval_interval: 5,
        labeled_batch: 8,
        unlabeled_per_domain: 30,
        seeds: vec![0],
        ..ExperimentConfig::default()
    };
    let outcome = run_grid(&cfg, tmp.path(), 2).unwrap();
    let complete = outcome.failed() == 0
        && VARIANTS.iter().all(|name| {
            let dir = tmp.path().join(name);
            dir.join("metrics.csv").is_file()
                && dir.join("report.json").is_file()
                && dir.join("resolved-config.json").is_file()
        });

    // Intra-Modal leaves exactly the translated-feature terms out: check
    // against an independently summed translated contribution.
    let mut bank = PrototypeBank::new(2, 3, 2, vec![2, 2], 0.9);
    for m in 0..2 {
        for k in 0..2 {
            bank.ema_update(&[(m, 1, k, vec![0.1 + 0.2 * m as f64, 0.3 * k as f64 - 0.2])])
                .unwrap();
        }
    }
    let original = [[vec![1.0, 0.0], vec![0.0, 1.0]], [vec![0.5, 0.5], vec![0.25, 0.75]]];
    let translated = [[vec![0.9, 0.1], vec![0.1, 0.9]], [vec![0.4, 0.6], vec![0.3, 0.7]]];
    let eval = |switches: CmpaSwitches| {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, v: &Vec<f64>| {
            tape.constant(Tensor::new(vec![1, 2], v.clone()).unwrap())
        };
        let subset = SubsetFeatures {
            original: original
                .iter()
                .map(|view| view.iter().map(|v| mk(&mut tape, v)).collect())
                .collect(),
            translated: translated
                .iter()
                .map(|view| view.iter().map(|v| mk(&mut tape, v)).collect())
                .collect(),
            pseudo_labels: vec![1],
            domains: vec![0],
        };
        let mut lb = LossBuilder::new(&mut tape);
        let sum = cmpa_sum(&mut lb, &bank, &subset, switches).unwrap();
        tape.value(sum).scalar_value()
    };
    let full = eval(CmpaSwitches::default());
    let intra_modal = eval(CmpaSwitches {
        translated: false,
        views: ViewSelection::Both,
        cross_domain: true,
    });
    let mut translated_terms = 0.0;
    for view in &translated {
        for (m, t) in view.iter().enumerate() {
            let mu = bank.get(m, 1, 0).unwrap();
            let mu_bar = bank.cross_domain_avg(m, 1, 0).unwrap();
            translated_terms += align_pair(t, mu, &mu_bar).unwrap() / t.len() as f64;
        }
    }
    let identity_err = (intra_modal - (full - translated_terms)).abs();

    verdict(
        "ablation_grid_integrity",
        complete && identity_err < 1e-9,
        &format!(
            "{} cells complete, intra-modal identity |error|={identity_err:.3e} (tol 1e-9)",
            VARIANTS.len() - outcome.failed()
        ),
    );
}
