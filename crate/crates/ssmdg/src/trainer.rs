//! Training loop: batch assembly over pooled source domains, weak/strong
//! forwarding, gating, loss assembly, optimizer step, prototype
//! maintenance, and the leave-one-domain-out / missing-modality
//! evaluation protocols.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{
    augment, leave_one_out, make_task, sample_split, AugmentStrength, DataError, DomainDataset,
    LabelBudget, Sample, TaskSpec, TestSet,
};
use crate::diffcore::{AdamWHyper, AdamWState, NodeId, Tape, Tensor};
use crate::gating::{gate_batch, GateDecision, GateError, GateTag, GateVariant, HeadProbs};
use crate::losses::{DarLossKind, LossBreakdown, LossBuilder, LossError, ViewSelection};
use crate::model::{
    forward_values, predict_fused_with_missing, Forward, ImputeMode, Model, ModelConfig,
    ModelError,
};
use crate::prototypes::{cmpa_sum, CmpaSwitches, ProtoError, PrototypeBank, SubsetFeatures};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite total loss at step {step}: {breakdown:?}")]
    NonFiniteLoss { step: usize, breakdown: LossBreakdown },
    #[error("decision/label length mismatch: {0} vs {1}")]
    MetricLengthMismatch(usize, usize),
    #[error("empty labeled pool across source domains")]
    EmptyLabeledPool,
    #[error("empty unlabeled pool across source domains")]
    EmptyUnlabeledPool,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error("diff engine: {0}")]
    Diff(#[from] crate::diffcore::DiffError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub tau: f64,
    pub q: f64,
    pub lambda_cdcr: f64,
    pub lambda_dar: f64,
    pub lambda_cmpa: f64,
    /// Prototype EMA momentum.
    pub alpha: f64,
    pub optimizer: AdamWHyper,
    pub labeled_batch: usize,
    /// Unlabeled-to-labeled ratio within a batch.
    pub mu_ratio: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub gate_variant: GateVariant,
    pub dar_loss: DarLossKind,
    pub dar_views: ViewSelection,
    pub cmpa_cross_domain: bool,
    pub cmpa_translated: bool,
    pub cmpa_views: ViewSelection,
    pub labels_per_class: usize,
    pub unlabeled_per_domain: usize,
    pub eval_missing: bool,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            tau: 0.95,
            q: 0.7,
            lambda_cdcr: 1.0,
            lambda_dar: 0.1,
            lambda_cmpa: 0.1,
            alpha: 0.9,
            optimizer: AdamWHyper::default(),
            labeled_batch: 32,
            mu_ratio: 1,
            total_steps: 2000,
            eval_interval: 500,
            gate_variant: GateVariant::Full,
            dar_loss: DarLossKind::Gce,
            dar_views: ViewSelection::Both,
            cmpa_cross_domain: true,
            cmpa_translated: true,
            cmpa_views: ViewSelection::Both,
            labels_per_class: 5,
            unlabeled_per_domain: 200,
            eval_missing: false,
            seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    pub fn cmpa_switches(&self) -> CmpaSwitches {
        CmpaSwitches {
            cross_domain: self.cmpa_cross_domain,
            translated: self.cmpa_translated,
            views: self.cmpa_views,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::InvalidConfig(m));
        self.task.validate()?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return err(format!("tau: must lie in (0, 1), got {}", self.tau));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return err(format!("q: must lie in (0, 1], got {}", self.q));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return err(format!("alpha: must lie in [0, 1), got {}", self.alpha));
        }
        for (name, v) in [
            ("lambda_cdcr", self.lambda_cdcr),
            ("lambda_dar", self.lambda_dar),
            ("lambda_cmpa", self.lambda_cmpa),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name}: must be finite and >= 0, got {v}"));
            }
        }
        if self.labeled_batch == 0 {
            return err("labeled_batch: must be positive".into());
        }
        if self.total_steps == 0 || self.eval_interval == 0 {
            return err("total_steps/eval_interval: must be positive".into());
        }
        if self.labels_per_class == 0 {
            return err("labels_per_class: must be positive".into());
        }
        if self.seeds.is_empty() {
            return err("seeds: must be non-empty".into());
        }
        if self.model.num_modalities != self.task.num_modalities {
            return err(format!(
                "model.num_modalities: {} does not match task.num_modalities {}",
                self.model.num_modalities, self.task.num_modalities
            ));
        }
        if self.model.input_dims != self.task.input_dims {
            return err(format!(
                "model.input_dims: {:?} does not match task.input_dims {:?}",
                self.model.input_dims, self.task.input_dims
            ));
        }
        if self.model.num_classes != self.task.num_classes {
            return err(format!(
                "model.num_classes: {} does not match task.num_classes {}",
                self.model.num_classes, self.task.num_classes
            ));
        }
        Ok(())
    }
}

/// One step's diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub losses: LossBreakdown,
    pub utilization: f64,
    /// Absent when no unlabeled sample was accepted this step.
    pub pl_accuracy: Option<f64>,
    /// Pseudo-label accuracy within the consensus set alone.
    pub pl_accuracy_consensus: Option<f64>,
    /// Pseudo-label accuracy within the disagreement set alone.
    pub pl_accuracy_disagreement: Option<f64>,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str =
        "step,sup,cdcr,dar,cmpa,total,utilization,pl_accuracy,n_consensus,n_disagreement";

    pub fn csv_row(&self) -> String {
        let pl = self.pl_accuracy.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.losses.sup,
            self.losses.cdcr,
            self.losses.dar,
            self.losses.cmpa,
            self.losses.total,
            self.utilization,
            pl,
            self.losses.n_consensus,
            self.losses.n_disagreement
        )
    }
}

/// One labeled sample's weak view, per modality, with provenance.
#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub domain: usize,
    pub label: usize,
    pub weak: Vec<Vec<f64>>,
}

/// One unlabeled sample's weak and strong views. The hidden label feeds
/// metrics only; it never reaches a loss.
#[derive(Debug, Clone)]
pub struct UnlabeledItem {
    pub domain: usize,
    pub hidden_label: usize,
    pub weak: Vec<Vec<f64>>,
    pub strong: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub labeled: Vec<LabeledItem>,
    pub unlabeled: Vec<UnlabeledItem>,
}

/// Uniform sampling with replacement from the pooled source-domain
/// labeled and unlabeled sets; views are drawn deterministically from
/// (seed, step).
pub fn assemble_batch(
    sources: &[DomainDataset],
    config: &ExperimentConfig,
    seed: u64,
    step: usize,
) -> Result<Batch, TrainError> {
    let labeled_pool: Vec<(usize, &Sample, usize)> = sources
        .iter()
        .flat_map(|d| d.labeled.iter().map(move |(s, y)| (d.domain_id, s, *y)))
        .collect();
    if labeled_pool.is_empty() {
        return Err(TrainError::EmptyLabeledPool);
    }
    let unlabeled_pool: Vec<(usize, &Sample, usize)> = sources
        .iter()
        .flat_map(|d| {
            d.unlabeled
                .iter()
                .zip(d.hidden_labels_for_metrics())
                .map(move |(s, y)| (d.domain_id, s, *y))
        })
        .collect();
    let n_unlabeled = config.mu_ratio * config.labeled_batch;
    if unlabeled_pool.is_empty() && n_unlabeled > 0 {
        return Err(TrainError::EmptyUnlabeledPool);
    }
    let mut rng = stream(seed, "batch", step as u64);
    let mut labeled = Vec::with_capacity(config.labeled_batch);
    for _ in 0..config.labeled_batch {
        let (k, s, y) = labeled_pool[rng.gen_range(0..labeled_pool.len())];
        let view_seed: u64 = rng.gen();
        labeled.push(LabeledItem {
            domain: k,
            label: y,
            weak: augment(s, AugmentStrength::Weak, config.task.noise_sigma, view_seed),
        });
    }
    let mut unlabeled = Vec::with_capacity(n_unlabeled);
    for _ in 0..n_unlabeled {
        let (k, s, y) = unlabeled_pool[rng.gen_range(0..unlabeled_pool.len())];
        let view_seed: u64 = rng.gen();
        unlabeled.push(UnlabeledItem {
            domain: k,
            hidden_label: y,
            weak: augment(s, AugmentStrength::Weak, config.task.noise_sigma, view_seed),
            strong: augment(s, AugmentStrength::Strong, config.task.noise_sigma, view_seed),
        });
    }
    Ok(Batch { labeled, unlabeled })
}

fn rows_tensor(rows: &[&Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), d], data).expect("consistent row widths")
}

/// Per-modality [n, d_m] input tensors for one view of a set of items.
fn batch_inputs(views: &[&Vec<Vec<f64>>], num_modalities: usize) -> Vec<Tensor> {
    (0..num_modalities)
        .map(|m| {
            let rows: Vec<&Vec<f64>> = views.iter().map(|v| &v[m]).collect();
            rows_tensor(&rows)
        })
        .collect()
}

/// Encoded features and per-head probabilities for one already-batched
/// view on the live tape.
fn forward_on_tape(
    fwd: &mut Forward<'_>,
    inputs: &[Tensor],
) -> Result<(Vec<NodeId>, Vec<NodeId>), ModelError> {
    let mut feats = Vec::with_capacity(inputs.len());
    for (m, x) in inputs.iter().enumerate() {
        let xid = fwd.tape.constant(x.clone());
        feats.push(fwd.encode(m, xid)?);
    }
    let probs = fwd.predict_heads(&feats)?;
    Ok((feats, probs))
}

/// Accepted-subset indices with their pseudo-labels and domains.
struct GatedSubset {
    indices: Vec<usize>,
    pseudo_labels: Vec<usize>,
    domains: Vec<usize>,
}

fn collect_subset(decisions: &[GateDecision], batch: &Batch, tag: GateTag) -> GatedSubset {
    let mut out = GatedSubset {
        indices: Vec::new(),
        pseudo_labels: Vec::new(),
        domains: Vec::new(),
    };
    for (i, d) in decisions.iter().enumerate() {
        if d.tag == tag {
            out.indices.push(i);
            out.pseudo_labels.push(d.pseudo_label.expect("accepted sample"));
            out.domains.push(batch.unlabeled[i].domain);
        }
    }
    out
}

/// Pseudo-label accuracy over accepted samples (absent when none) and
/// utilization.
pub fn pseudo_label_metrics(
    decisions: &[GateDecision],
    hidden_labels: &[usize],
) -> Result<(Option<f64>, f64), TrainError> {
    if decisions.len() != hidden_labels.len() {
        return Err(TrainError::MetricLengthMismatch(
            decisions.len(),
            hidden_labels.len(),
        ));
    }
    let mut accepted = 0usize;
    let mut correct = 0usize;
    for (d, &y) in decisions.iter().zip(hidden_labels) {
        if d.accepted() {
            accepted += 1;
            if d.pseudo_label == Some(y) {
                correct += 1;
            }
        }
    }
    let utilization = if decisions.is_empty() {
        0.0
    } else {
        accepted as f64 / decisions.len() as f64
    };
    let accuracy = (accepted > 0).then(|| correct as f64 / accepted as f64);
    Ok((accuracy, utilization))
}

fn tagged_pl_accuracy(
    decisions: &[GateDecision],
    hidden_labels: &[usize],
    tag: GateTag,
) -> Option<f64> {
    let mut n = 0usize;
    let mut correct = 0usize;
    for (d, &y) in decisions.iter().zip(hidden_labels) {
        if d.tag == tag {
            n += 1;
            if d.pseudo_label == Some(y) {
                correct += 1;
            }
        }
    }
    (n > 0).then(|| correct as f64 / n as f64)
}

/// One optimization step over an assembled batch; mutates model, bank,
/// and optimizer state in place.
pub fn train_step(
    model: &mut Model,
    bank: &mut PrototypeBank,
    optimizer: &mut AdamWState,
    batch: &Batch,
    config: &ExperimentConfig,
    step: usize,
) -> Result<StepMetrics, TrainError> {
    let m_count = model.config.num_modalities;

    // (3 is computed early because its pass is value-only and does not
    // touch the graph) weak pass on the unlabeled batch drives the gate
    let (decisions, utilization) = if batch.unlabeled.is_empty() {
        (Vec::new(), 0.0)
    } else {
        let views: Vec<&Vec<Vec<f64>>> = batch.unlabeled.iter().map(|s| &s.weak).collect();
        let (_, probs) = forward_values(model, &batch_inputs(&views, m_count))?;
        let preds: Vec<HeadProbs> = (0..batch.unlabeled.len())
            .map(|i| HeadProbs {
                unimodal: (0..m_count).map(|m| probs[m].row(i).to_vec()).collect(),
                fused: probs[m_count].row(i).to_vec(),
            })
            .collect();
        gate_batch(&preds, config.tau, config.gate_variant)?
    };
    let consensus = collect_subset(&decisions, batch, GateTag::Consensus);
    let disagreement = collect_subset(&decisions, batch, GateTag::Disagreement);
    let n_cons = consensus.indices.len();
    let n_dis = disagreement.indices.len();

    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, model);

    // (1) labeled weak forward
    let labeled_views: Vec<&Vec<Vec<f64>>> = batch.labeled.iter().map(|s| &s.weak).collect();
    let labels: Vec<usize> = batch.labeled.iter().map(|s| s.label).collect();
    let labeled_inputs = batch_inputs(&labeled_views, m_count);
    let (labeled_feats, labeled_probs) = forward_on_tape(&mut fwd, &labeled_inputs)?;

    // (2) gradient-isolated labeled features refresh the prototype bank
    let mut proto_feed = Vec::new();
    for (m, &feat) in labeled_feats.iter().enumerate() {
        let values = fwd.tape.value(feat).clone();
        for (i, item) in batch.labeled.iter().enumerate() {
            proto_feed.push((m, item.label, item.domain, values.row(i).to_vec()));
        }
    }
    bank.ema_update(&proto_feed)?;

    // (4) on-tape weak and strong passes for each accepted subset, plus
    // translator forwards
    let need_unlabeled_graph =
        config.lambda_cdcr > 0.0 || config.lambda_dar > 0.0 || config.lambda_cmpa > 0.0;
    let mut subset_feats: Vec<Option<(SubsetFeatures, Vec<NodeId>, Vec<NodeId>)>> =
        vec![None, None];
    if need_unlabeled_graph {
        for (slot, subset) in [(0usize, &consensus), (1, &disagreement)] {
            if subset.indices.is_empty() {
                continue;
            }
            let weak_views: Vec<&Vec<Vec<f64>>> = subset
                .indices
                .iter()
                .map(|&i| &batch.unlabeled[i].weak)
                .collect();
            let strong_views: Vec<&Vec<Vec<f64>>> = subset
                .indices
                .iter()
                .map(|&i| &batch.unlabeled[i].strong)
                .collect();
            let (wf, wp) = forward_on_tape(&mut fwd, &batch_inputs(&weak_views, m_count))?;
            let (sf, sp) = forward_on_tape(&mut fwd, &batch_inputs(&strong_views, m_count))?;
            // translators map every other modality's feature into m's space
            let mut translated = Vec::with_capacity(2);
            for feats in [&wf, &sf] {
                let mut per_m = Vec::with_capacity(m_count);
                for m in 0..m_count {
                    let available: Vec<(usize, NodeId)> = (0..m_count)
                        .filter(|&o| o != m)
                        .map(|o| (o, feats[o]))
                        .collect();
                    per_m.push(fwd.translate_into(m, &available)?);
                }
                translated.push(per_m);
            }
            subset_feats[slot] = Some((
                SubsetFeatures {
                    original: vec![wf, sf],
                    translated,
                    pseudo_labels: subset.pseudo_labels.clone(),
                    domains: subset.domains.clone(),
                },
                wp,
                sp,
            ));
        }
    }

    // losses: supervised (Eq. 7 analogue), then the three terms
    let mut lb = LossBuilder::new(fwd.tape);
    let sup = lb.loss_sup(&labeled_probs, &labels)?;

    // (5) consensus consistency. The FusedOnly reference follows the
    // FixMatch recipe literally: the weak fused pseudo-label supervises
    // the strong fused prediction alone, with no unimodal heads involved.
    let mut cdcr = lb.zero();
    if config.lambda_cdcr > 0.0 {
        if let Some((feats, _, strong_probs)) = &subset_feats[0] {
            cdcr = if config.gate_variant == GateVariant::FusedOnly {
                lb.loss_cdcr(&strong_probs[m_count..], &feats.pseudo_labels)?
            } else {
                lb.loss_cdcr(strong_probs, &feats.pseudo_labels)?
            };
        }
    }

    // (6) disagreement robustness
    let mut dar = lb.zero();
    if config.lambda_dar > 0.0 {
        if let Some((feats, weak_probs, strong_probs)) = &subset_feats[1] {
            dar = lb.loss_dar(
                weak_probs,
                strong_probs,
                &feats.pseudo_labels,
                config.q,
                config.dar_loss,
                config.dar_views,
            )?;
        }
    }

    // (7) prototype alignment over the accepted union, mean per sample
    let mut cmpa = lb.zero();
    if config.lambda_cmpa > 0.0 && n_cons + n_dis > 0 {
        let mut acc = lb.zero();
        for slot in &subset_feats {
            if let Some((feats, _, _)) = slot {
                let term = cmpa_sum(&mut lb, bank, feats, config.cmpa_switches())?;
                acc = lb.add(acc, term)?;
            }
        }
        let zero = lb.zero();
        cmpa = lb.add_scaled(zero, acc, 1.0 / (n_cons + n_dis) as f64)?;
    }

    // (8) weighted total, backward, optimizer step
    let mut total = sup;
    total = lb.add_scaled(total, cdcr, config.lambda_cdcr)?;
    total = lb.add_scaled(total, dar, config.lambda_dar)?;
    total = lb.add_scaled(total, cmpa, config.lambda_cmpa)?;

    let breakdown = LossBreakdown::assemble(
        lb.tape.value(sup).scalar_value(),
        lb.tape.value(cdcr).scalar_value(),
        lb.tape.value(dar).scalar_value(),
        lb.tape.value(cmpa).scalar_value(),
        (config.lambda_cdcr, config.lambda_dar, config.lambda_cmpa),
        (batch.labeled.len(), n_cons, n_dis),
    );
    if !lb.tape.value(total).scalar_value().is_finite() {
        return Err(TrainError::NonFiniteLoss { step, breakdown });
    }
    let grads = lb.tape.backward(total)?;
    optimizer.step(&mut model.params, &grads)?;

    // (9) diagnostics; hidden labels appear here and nowhere else
    let hidden: Vec<usize> = batch.unlabeled.iter().map(|s| s.hidden_label).collect();
    let (pl_accuracy, _) = pseudo_label_metrics(&decisions, &hidden)?;
    Ok(StepMetrics {
        step,
        losses: breakdown,
        utilization,
        pl_accuracy,
        pl_accuracy_consensus: tagged_pl_accuracy(&decisions, &hidden, GateTag::Consensus),
        pl_accuracy_disagreement: tagged_pl_accuracy(&decisions, &hidden, GateTag::Disagreement),
    })
}

/// Fused-head accuracy on raw (unaugmented) inputs, optionally with one
/// modality withheld and imputed.
pub fn evaluate(
    model: &Model,
    test: &TestSet,
    missing: Option<(usize, ImputeMode)>,
) -> Result<f64, TrainError> {
    if test.samples.is_empty() {
        return Ok(0.0);
    }
    let m_count = model.config.num_modalities;
    let views: Vec<&Vec<Vec<f64>>> = test.samples.iter().map(|(s, _)| &s.inputs).collect();
    let inputs = batch_inputs(&views, m_count);
    let fused = match missing {
        None => {
            let (_, probs) = forward_values(model, &inputs)?;
            probs[m_count].clone()
        }
        Some((drop_m, mode)) => {
            let opt: Vec<Option<Tensor>> = inputs
                .into_iter()
                .enumerate()
                .map(|(m, t)| (m != drop_m).then_some(t))
                .collect();
            predict_fused_with_missing(model, &opt, mode)?
        }
    };
    let correct = test
        .samples
        .iter()
        .enumerate()
        .filter(|(i, (_, y))| crate::gating::argmax(fused.row(*i)) == *y)
        .count();
    Ok(correct as f64 / test.samples.len() as f64)
}

/// One target domain's training outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetReport {
    pub target_domain: usize,
    pub accuracy: f64,
    /// Keyed "m{index}_{zero|translate}" when missing-modality evaluation
    /// is enabled.
    pub missing_accuracy: BTreeMap<String, f64>,
    /// (step, target accuracy) at each eval interval.
    pub eval_series: Vec<(usize, f64)>,
    pub metrics: Vec<StepMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub targets: Vec<TargetReport>,
    /// Arithmetic mean of per-target accuracies.
    pub mean_accuracy: f64,
    pub config: ExperimentConfig,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Train against one leave-one-out split. Everything downstream of
/// (config, seed, target) is deterministic.
pub fn train_single_target(
    config: &ExperimentConfig,
    seed: u64,
    datasets: &[DomainDataset],
    target_k: usize,
) -> Result<(Model, TargetReport), TrainError> {
    let (sources, test) = leave_one_out(datasets, target_k)?;
    let mut model_cfg = config.model.clone();
    model_cfg.init_seed = stream(seed, "model-init", target_k as u64).next_u64();
    let mut model = Model::init(model_cfg);
    let mut bank = PrototypeBank::new(
        config.model.num_modalities,
        config.model.num_classes,
        config.task.num_domains,
        config.model.feature_dims.clone(),
        config.alpha,
    );
    let mut optimizer = AdamWState::new(config.optimizer);
    let mut metrics = Vec::with_capacity(config.total_steps);
    let mut eval_series = Vec::new();
    let batch_seed = stream(seed, "run", target_k as u64).next_u64();
    for step in 0..config.total_steps {
        let batch = assemble_batch(&sources, config, batch_seed, step)?;
        debug_assert!(batch
            .labeled
            .iter()
            .map(|s| s.domain)
            .chain(batch.unlabeled.iter().map(|s| s.domain))
            .all(|k| k != target_k));
        metrics.push(train_step(
            &mut model,
            &mut bank,
            &mut optimizer,
            &batch,
            config,
            step,
        )?);
        if (step + 1) % config.eval_interval == 0 {
            eval_series.push((step + 1, evaluate(&model, &test, None)?));
        }
    }
    let accuracy = evaluate(&model, &test, None)?;
    let mut missing_accuracy = BTreeMap::new();
    if config.eval_missing {
        for m in 0..config.model.num_modalities {
            for (label, mode) in [("zero", ImputeMode::Zero), ("translate", ImputeMode::Translate)]
            {
                missing_accuracy.insert(
                    format!("m{m}_{label}"),
                    evaluate(&model, &test, Some((m, mode)))?,
                );
            }
        }
    }
    Ok((
        model,
        TargetReport {
            target_domain: target_k,
            accuracy,
            missing_accuracy,
            eval_series,
            metrics,
        },
    ))
}

/// One seed's full leave-one-domain-out sweep.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RunReport, TrainError> {
    config.validate()?;
    let started = Instant::now();
    let mut task_spec = config.task.clone();
    task_spec.seed = seed;
    let task = make_task(&task_spec)?;
    let datasets = sample_split(
        &task,
        LabelBudget::Count(config.labels_per_class),
        config.unlabeled_per_domain,
        seed,
    )?;
    let mut targets = Vec::with_capacity(config.task.num_domains);
    for target_k in 0..config.task.num_domains {
        let (_, report) = train_single_target(config, seed, &datasets, target_k)?;
        targets.push(report);
    }
    let mean_accuracy = targets.iter().map(|t| t.accuracy).sum::<f64>() / targets.len() as f64;
    Ok(RunReport {
        seed,
        targets,
        mean_accuracy,
        config: config.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// All configured seeds, aggregated with a mean +/- std summary.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, TrainError> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        runs.push(run_seed(config, seed)?);
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.mean_accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
    Ok(ExperimentReport {
        runs,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
    })
}
