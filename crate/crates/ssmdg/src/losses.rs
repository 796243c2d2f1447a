//! Objective terms: cross-entropy, generalized cross-entropy, supervised
//! loss, consensus-set consistency loss, disagreement-set robust loss, the
//! feature alignment pair loss, and the weighted total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{NodeId, OpKind, Tape, Tensor};

/// Probabilities are clamped below at this value before log/pow.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("gce exponent q must lie in (0, 1], got {0}")]
    QOutOfRange(f64),
    #[error("feature dim {0} does not match prototype dim {1}")]
    DimMismatch(usize, usize),
    #[error("supervised loss needs a non-empty labeled batch")]
    EmptyLabeledBatch,
    #[error("diff engine: {0}")]
    Diff(#[from] crate::diffcore::DiffError),
}

/// -log p[label], with the probability clamped below at `PROB_FLOOR`.
pub fn cross_entropy(label: usize, p: &[f64]) -> Result<f64, LossError> {
    if label >= p.len() {
        return Err(LossError::LabelOutOfRange {
            label,
            classes: p.len(),
        });
    }
    Ok(-p[label].max(PROB_FLOOR).ln())
}

/// Generalized cross-entropy (1 - p[label]^q) / q, q in (0, 1].
pub fn gce(label: usize, p: &[f64], q: f64) -> Result<f64, LossError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(LossError::QOutOfRange(q));
    }
    if label >= p.len() {
        return Err(LossError::LabelOutOfRange {
            label,
            classes: p.len(),
        });
    }
    Ok((1.0 - p[label].max(PROB_FLOOR).powf(q)) / q)
}

/// ||z - mu||^2 + ||z - mu_bar||^2 on plain values.
pub fn align_pair(z: &[f64], mu: &[f64], mu_bar: &[f64]) -> Result<f64, LossError> {
    if z.len() != mu.len() || z.len() != mu_bar.len() {
        return Err(LossError::DimMismatch(z.len(), mu.len().max(mu_bar.len())));
    }
    let d2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
    };
    Ok(d2(z, mu) + d2(z, mu_bar))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DarLossKind {
    Gce,
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSelection {
    Both,
    Weak,
    Strong,
}

impl ViewSelection {
    pub fn uses_weak(self) -> bool {
        matches!(self, ViewSelection::Both | ViewSelection::Weak)
    }
    pub fn uses_strong(self) -> bool {
        matches!(self, ViewSelection::Both | ViewSelection::Strong)
    }
}

/// Per-step loss components and their weighted sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub cdcr: f64,
    pub dar: f64,
    pub cmpa: f64,
    pub total: f64,
    pub n_labeled: usize,
    pub n_consensus: usize,
    pub n_disagreement: usize,
}

impl LossBreakdown {
    pub fn assemble(
        sup: f64,
        cdcr: f64,
        dar: f64,
        cmpa: f64,
        lambdas: (f64, f64, f64),
        counts: (usize, usize, usize),
    ) -> LossBreakdown {
        LossBreakdown {
            sup,
            cdcr,
            dar,
            cmpa,
            total: sup + lambdas.0 * cdcr + lambdas.1 * dar + lambdas.2 * cmpa,
            n_labeled: counts.0,
            n_consensus: counts.1,
            n_disagreement: counts.2,
        }
    }
}

/// Graph-building loss assembly over batched probability tensors.
pub struct LossBuilder<'a> {
    pub tape: &'a mut Tape,
}

impl<'a> LossBuilder<'a> {
    pub fn new(tape: &'a mut Tape) -> Self {
        LossBuilder { tape }
    }

    pub fn zero(&mut self) -> NodeId {
        self.tape.constant(Tensor::scalar(0.0))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, LossError> {
        Ok(self.tape.apply(OpKind::Add, &[a, b], None)?)
    }

    pub fn add_scaled(&mut self, acc: NodeId, term: NodeId, weight: f64) -> Result<NodeId, LossError> {
        let scaled = self.tape.apply(OpKind::Scale, &[term], Some(weight))?;
        self.add(acc, scaled)
    }

    fn gather_clamped(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId, LossError> {
        let classes = *self.tape.shape(probs).last().unwrap();
        for &y in labels {
            if y >= classes {
                return Err(LossError::LabelOutOfRange { label: y, classes });
            }
        }
        let idx = self
            .tape
            .constant(Tensor::vector(labels.iter().map(|&y| y as f64).collect()));
        let sel = self.tape.apply(OpKind::GatherIndex, &[probs, idx], None)?;
        // numerical floor before log/pow
        let eps = self
            .tape
            .constant(Tensor::vector(vec![PROB_FLOOR; labels.len()]));
        Ok(self.tape.apply(OpKind::Add, &[sel, eps], None)?)
    }

    /// Mean cross-entropy of one head's probabilities against labels.
    pub fn ce_mean(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId, LossError> {
        let sel = self.gather_clamped(probs, labels)?;
        let lg = self.tape.apply(OpKind::Log, &[sel], None)?;
        let mean = self.tape.apply(OpKind::MeanAll, &[lg], None)?;
        Ok(self.tape.apply(OpKind::Scale, &[mean], Some(-1.0))?)
    }

    /// Mean GCE of one head: (1 - mean(p_y^q)) / q.
    pub fn gce_mean(&mut self, probs: NodeId, labels: &[usize], q: f64) -> Result<NodeId, LossError> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(LossError::QOutOfRange(q));
        }
        let sel = self.gather_clamped(probs, labels)?;
        let powed = self.tape.apply(OpKind::PowScalar, &[sel], Some(q))?;
        let mean = self.tape.apply(OpKind::MeanAll, &[powed], None)?;
        let neg = self.tape.apply(OpKind::Scale, &[mean], Some(-1.0 / q))?;
        let one_over_q = self.tape.constant(Tensor::scalar(1.0 / q));
        self.add(neg, one_over_q)
    }

    /// Supervised loss: mean over the labeled batch of the summed
    /// per-head cross-entropies (unimodal heads plus fused).
    pub fn loss_sup(&mut self, head_probs: &[NodeId], labels: &[usize]) -> Result<NodeId, LossError> {
        if labels.is_empty() {
            return Err(LossError::EmptyLabeledBatch);
        }
        let mut acc = self.zero();
        for &p in head_probs {
            let term = self.ce_mean(p, labels)?;
            acc = self.add(acc, term)?;
        }
        Ok(acc)
    }

    /// Consensus consistency loss: per-head cross-entropy of strong-view
    /// predictions against the (constant) pseudo-labels.
    pub fn loss_cdcr(
        &mut self,
        strong_head_probs: &[NodeId],
        pseudo_labels: &[usize],
    ) -> Result<NodeId, LossError> {
        if pseudo_labels.is_empty() {
            return Ok(self.zero());
        }
        let mut acc = self.zero();
        for &p in strong_head_probs {
            let term = self.ce_mean(p, pseudo_labels)?;
            acc = self.add(acc, term)?;
        }
        Ok(acc)
    }

    /// Disagreement loss over both views of every head. Gradients flow
    /// through weak and strong predictions alike; pseudo-labels stay
    /// constant.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_dar(
        &mut self,
        weak_head_probs: &[NodeId],
        strong_head_probs: &[NodeId],
        pseudo_labels: &[usize],
        q: f64,
        kind: DarLossKind,
        views: ViewSelection,
    ) -> Result<NodeId, LossError> {
        if pseudo_labels.is_empty() {
            return Ok(self.zero());
        }
        let mut acc = self.zero();
        let add_view = |this: &mut Self, probs: &[NodeId], acc: NodeId| -> Result<NodeId, LossError> {
            let mut acc = acc;
            for &p in probs {
                let term = match kind {
                    DarLossKind::Gce => this.gce_mean(p, pseudo_labels, q)?,
                    DarLossKind::Ce => this.ce_mean(p, pseudo_labels)?,
                };
                acc = this.add(acc, term)?;
            }
            Ok(acc)
        };
        if views.uses_weak() {
            acc = add_view(self, weak_head_probs, acc)?;
        }
        if views.uses_strong() {
            acc = add_view(self, strong_head_probs, acc)?;
        }
        Ok(acc)
    }

    /// Alignment pair on batched features [n, d] against constant
    /// per-sample targets: sum over the batch of
    /// ||z - mu||^2 + ||z - mu_bar||^2 (normalization happens outside).
    pub fn align_pair_sum(
        &mut self,
        z: NodeId,
        mu: Tensor,
        mu_bar: Tensor,
    ) -> Result<NodeId, LossError> {
        if self.tape.shape(z) != mu.shape() || self.tape.shape(z) != mu_bar.shape() {
            return Err(LossError::DimMismatch(
                self.tape.shape(z).iter().product(),
                mu.len(),
            ));
        }
        let mu = self.tape.constant(mu);
        let mu_bar = self.tape.constant(mu_bar);
        let a = self.tape.apply(OpKind::SqL2Dist, &[z, mu], None)?;
        let b = self.tape.apply(OpKind::SqL2Dist, &[z, mu_bar], None)?;
        self.add(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, GradientMap, ParamMap};

    #[test]
    fn cross_entropy_closed_forms() {
        assert_eq!(cross_entropy(0, &[1.0, 0.0]).unwrap(), -0.0f64.max(0.0));
        assert!((cross_entropy(2, &[0.25; 4]).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(1, &[0.5, 0.5]).unwrap() - 0.693147).abs() < 1e-6);
        assert!(cross_entropy(5, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn gce_closed_forms() {
        assert_eq!(gce(0, &[1.0, 0.0], 0.3).unwrap(), 0.0);
        // q = 1 reduces to 1 - p exactly
        assert_eq!(gce(0, &[0.37, 0.63], 1.0).unwrap(), 1.0 - 0.37);
        // independent high-precision evaluation of (1 - 0.9^0.7) / 0.7
        let expected = (1.0 - (0.7f64 * 0.9f64.ln()).exp()) / 0.7;
        assert!((gce(0, &[0.9, 0.1], 0.7).unwrap() - expected).abs() < 1e-15);
        assert!((gce(0, &[0.9, 0.1], 0.7).unwrap() - 0.101569).abs() < 1e-6);
        assert!(gce(0, &[1.0, 0.0], 0.0).is_err());
        assert!(gce(0, &[1.0, 0.0], 1.5).is_err());
    }

    #[test]
    fn gce_bounds_and_limits() {
        for q in [0.2, 0.7, 1.0] {
            let mut prev = f64::INFINITY;
            for i in 1..100 {
                let p = i as f64 / 100.0;
                let v = gce(0, &[p, 1.0 - p], q).unwrap();
                assert!(v >= 0.0 && v <= 1.0 / q + 1e-12);
                assert!(v < prev, "gce not strictly decreasing at p={p}");
                prev = v;
            }
        }
        // q -> 0 approaches cross-entropy
        for p in [0.1, 0.5, 0.9, 0.99] {
            let g = gce(0, &[p, 1.0 - p], 1e-3).unwrap();
            let ce = cross_entropy(0, &[p, 1.0 - p]).unwrap();
            assert!((g - ce).abs() < 5e-3, "p={p}: {g} vs {ce}");
        }
    }

    #[test]
    fn align_pair_values() {
        assert_eq!(align_pair(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(align_pair(&[0.3, 0.4], &[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert!(align_pair(&[1.0], &[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn breakdown_additivity_and_linearity() {
        let b = LossBreakdown::assemble(1.5, 0.4, 0.2, 0.8, (1.0, 0.1, 0.1), (32, 5, 3));
        assert!((b.total - (1.5 + 0.4 + 0.02 + 0.08)).abs() < 1e-9);
        let b2 = LossBreakdown::assemble(1.5, 0.4, 0.2, 0.8, (1.0, 0.2, 0.1), (32, 5, 3));
        assert!(((b2.total - b.total) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn empty_sets_contribute_zero() {
        let mut tape = Tape::new();
        let mut lb = LossBuilder::new(&mut tape);
        let cdcr = lb.loss_cdcr(&[], &[]).unwrap();
        let dar = lb
            .loss_dar(&[], &[], &[], 0.7, DarLossKind::Gce, ViewSelection::Both)
            .unwrap();
        assert_eq!(tape.value(cdcr).scalar_value(), 0.0);
        assert_eq!(tape.value(dar).scalar_value(), 0.0);
    }

    #[test]
    fn sup_loss_uniform_predictions() {
        // uniform over 7 classes, 3 heads -> 3 ln 7
        let mut tape = Tape::new();
        let uniform = Tensor::new(vec![2, 7], vec![1.0 / 7.0; 14]).unwrap();
        let heads: Vec<_> = (0..3).map(|_| tape.constant(uniform.clone())).collect();
        let mut lb = LossBuilder::new(&mut tape);
        let loss = lb.loss_sup(&heads, &[0, 4]).unwrap();
        assert!((tape.value(loss).scalar_value() - 3.0 * 7.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn sup_loss_requires_labels() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let mut lb = LossBuilder::new(&mut tape);
        assert!(matches!(
            lb.loss_sup(&[p], &[]),
            Err(LossError::EmptyLabeledBatch)
        ));
    }

    #[test]
    fn cdcr_single_term_example() {
        // one sample: fused strong prob 0.5 on the pseudo-label, unimodal
        // heads certain -> single CE term ln 2
        let mut tape = Tape::new();
        let certain = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let certain2 = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let fused = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let mut lb = LossBuilder::new(&mut tape);
        let loss = lb.loss_cdcr(&[certain, certain2, fused], &[0]).unwrap();
        assert!((tape.value(loss).scalar_value() - 0.693147).abs() < 1e-5);
    }

    #[test]
    fn dar_six_terms_at_m2() {
        // all six probabilities certain on the pseudo-label -> 0
        let mut tape = Tape::new();
        let certain = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let weak: Vec<_> = (0..3).map(|_| tape.constant(certain.clone())).collect();
        let strong: Vec<_> = (0..3).map(|_| tape.constant(certain.clone())).collect();
        let mut lb = LossBuilder::new(&mut tape);
        let loss = lb
            .loss_dar(&weak, &strong, &[0], 0.7, DarLossKind::Gce, ViewSelection::Both)
            .unwrap();
        assert!(tape.value(loss).scalar_value().abs() < 1e-9);

        // half-confidence everywhere -> 6 equal GCE terms
        let mut tape = Tape::new();
        let half = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let weak: Vec<_> = (0..3).map(|_| tape.constant(half.clone())).collect();
        let strong: Vec<_> = (0..3).map(|_| tape.constant(half.clone())).collect();
        let mut lb = LossBuilder::new(&mut tape);
        let loss = lb
            .loss_dar(&weak, &strong, &[0], 0.7, DarLossKind::Gce, ViewSelection::Both)
            .unwrap();
        let single = gce(0, &[0.5, 0.5], 0.7).unwrap();
        assert!((tape.value(loss).scalar_value() - 6.0 * single).abs() < 1e-9);
    }

    #[test]
    fn align_pair_gradient_matches_closed_form() {
        let mut params = ParamMap::new();
        params.insert("z".into(), Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let mu = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let mu_bar = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();

        let run = |p: &ParamMap| -> Result<(f64, GradientMap), LossError> {
            let mut tape = Tape::new();
            let ids = tape.bind_params(p);
            let mut lb = LossBuilder::new(&mut tape);
            let loss = lb.align_pair_sum(ids["z"], mu.clone(), mu_bar.clone())?;
            let v = tape.value(loss).scalar_value();
            Ok((v, tape.backward(loss)?))
        };
        let (v, g) = run(&params).unwrap();
        assert_eq!(v, 2.0);
        // 2(z - mu) + 2(z - mu_bar)
        assert_eq!(g["z"].data(), &[2.0 + 0.0, 0.0 - 2.0]);
        let err =
            finite_diff_check(|p| Ok(run(p).expect("loss builds").0), &params, &g, 1e-5).unwrap();
        assert!(err < 1e-8);
    }
}
