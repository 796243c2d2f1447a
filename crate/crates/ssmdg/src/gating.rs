//! Prediction-space sample selector: partitions an unlabeled batch into
//! the consensus set, the disagreement set, and rejects, under the full
//! rule and its ablation variants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GateError {
    #[error("tau must lie in (0, 1), got {0}")]
    TauOutOfRange(f64),
    #[error("head {head} is not a probability distribution (sum {sum})")]
    InvalidDistribution { head: usize, sum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    Full,
    Mean,
    Any2,
    Strict,
    /// FixMatch-style reference: fused confidence only, no disagreement set.
    FusedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateTag {
    Consensus,
    Disagreement,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub tag: GateTag,
    /// Present unless Rejected.
    pub pseudo_label: Option<usize>,
    pub fused_confidence: f64,
}

impl GateDecision {
    pub fn accepted(&self) -> bool {
        self.tag != GateTag::Rejected
    }
}

/// Weak-view probability vectors for one sample: unimodal heads in
/// modality order plus the fused head.
#[derive(Debug, Clone)]
pub struct HeadProbs {
    pub unimodal: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn check_distribution(head: usize, p: &[f64]) -> Result<(), GateError> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(GateError::InvalidDistribution { head, sum });
    }
    Ok(())
}

/// Gate one sample. The fused-confidence requirement (max fused > tau) is
/// a precondition for acceptance under every variant, so that consensus
/// and disagreement always partition the fused-confident set.
pub fn gate_sample(
    pred_w: &HeadProbs,
    tau: f64,
    variant: GateVariant,
) -> Result<GateDecision, GateError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(GateError::TauOutOfRange(tau));
    }
    for (i, p) in pred_w.unimodal.iter().enumerate() {
        check_distribution(i, p)?;
    }
    check_distribution(pred_w.unimodal.len(), &pred_w.fused)?;

    let fused_label = argmax(&pred_w.fused);
    let fused_conf = pred_w.fused[fused_label];
    if fused_conf <= tau {
        return Ok(GateDecision {
            tag: GateTag::Rejected,
            pseudo_label: None,
            fused_confidence: fused_conf,
        });
    }

    let uni_args: Vec<usize> = pred_w.unimodal.iter().map(|p| argmax(p)).collect();
    let uni_conf: Vec<f64> = pred_w
        .unimodal
        .iter()
        .zip(&uni_args)
        .map(|(p, &a)| p[a])
        .collect();

    let (consensus, label) = match variant {
        GateVariant::Full => {
            let hit = uni_args
                .iter()
                .zip(&uni_conf)
                .any(|(&a, &c)| a == fused_label && c > tau);
            (hit, fused_label)
        }
        GateVariant::Strict => {
            let all = uni_args
                .iter()
                .zip(&uni_conf)
                .all(|(&a, &c)| a == fused_label && c > tau);
            (all, fused_label)
        }
        GateVariant::Any2 => {
            // pairs drawn from the M unimodal heads plus the fused head;
            // the agreeing class must equal the fused pseudo-label
            let mut heads: Vec<(usize, f64)> = uni_args
                .iter()
                .zip(&uni_conf)
                .map(|(&a, &c)| (a, c))
                .collect();
            heads.push((fused_label, fused_conf));
            let matching = heads
                .iter()
                .filter(|&&(a, c)| a == fused_label && c > tau)
                .count();
            (matching >= 2, fused_label)
        }
        GateVariant::Mean => {
            // average every head whose max exceeds tau (the fused head
            // qualifies here by the precondition above)
            let c = pred_w.fused.len();
            let mut avg = vec![0.0; c];
            let mut n = 0usize;
            for (p, (&a, _)) in pred_w
                .unimodal
                .iter()
                .chain(std::iter::once(&pred_w.fused))
                .zip(uni_args.iter().zip(&uni_conf).chain(std::iter::once((&fused_label, &fused_conf))))
            {
                if p[a] > tau {
                    for (s, &v) in avg.iter_mut().zip(p) {
                        *s += v;
                    }
                    n += 1;
                }
            }
            for s in avg.iter_mut() {
                *s /= n as f64;
            }
            let mean_label = argmax(&avg);
            (avg[mean_label] > tau, mean_label)
        }
        GateVariant::FusedOnly => (true, fused_label),
    };

    if consensus {
        Ok(GateDecision {
            tag: GateTag::Consensus,
            pseudo_label: Some(label),
            fused_confidence: fused_conf,
        })
    } else if variant == GateVariant::FusedOnly {
        unreachable!("fused-only consensus covers the confident case")
    } else {
        Ok(GateDecision {
            tag: GateTag::Disagreement,
            pseudo_label: Some(fused_label),
            fused_confidence: fused_conf,
        })
    }
}

/// Gate a whole batch; utilization is the accepted fraction.
pub fn gate_batch(
    preds: &[HeadProbs],
    tau: f64,
    variant: GateVariant,
) -> Result<(Vec<GateDecision>, f64), GateError> {
    let mut decisions = Vec::with_capacity(preds.len());
    for p in preds {
        decisions.push(gate_sample(p, tau, variant)?);
    }
    let utilization = if decisions.is_empty() {
        0.0
    } else {
        decisions.iter().filter(|d| d.accepted()).count() as f64 / decisions.len() as f64
    };
    Ok((decisions, utilization))
}

/// Independent brute-force re-evaluation of the gating rules, kept
/// deliberately separate from `gate_sample` as its correctness oracle.
pub mod oracle {
    use super::{argmax, GateDecision, GateTag, GateVariant, HeadProbs};

    pub fn gate_sample(pred_w: &HeadProbs, tau: f64, variant: GateVariant) -> GateDecision {
        let y_hat = argmax(&pred_w.fused);
        let fused_confidence = pred_w.fused[y_hat];
        let rule1 = fused_confidence > tau;
        if !rule1 {
            return GateDecision {
                tag: GateTag::Rejected,
                pseudo_label: None,
                fused_confidence,
            };
        }

        let decision = |consensus: bool, label: usize| GateDecision {
            tag: if consensus {
                GateTag::Consensus
            } else {
                GateTag::Disagreement
            },
            pseudo_label: Some(label),
            fused_confidence,
        };

        match variant {
            GateVariant::Full => {
                // rule 2 and 3 checked per modality, literally
                let mut ok = false;
                for p in &pred_w.unimodal {
                    let a = argmax(p);
                    if a == y_hat && p[a] > tau {
                        ok = true;
                    }
                }
                decision(ok, y_hat)
            }
            GateVariant::Strict => {
                let mut all = true;
                for p in &pred_w.unimodal {
                    let a = argmax(p);
                    if !(a == y_hat && p[a] > tau) {
                        all = false;
                    }
                }
                decision(all, y_hat)
            }
            GateVariant::Any2 => {
                let mut heads: Vec<&Vec<f64>> = pred_w.unimodal.iter().collect();
                heads.push(&pred_w.fused);
                let mut found = false;
                for i in 0..heads.len() {
                    for j in i + 1..heads.len() {
                        let (ai, aj) = (argmax(heads[i]), argmax(heads[j]));
                        if ai == aj
                            && ai == y_hat
                            && heads[i][ai] > tau
                            && heads[j][aj] > tau
                        {
                            found = true;
                        }
                    }
                }
                decision(found, y_hat)
            }
            GateVariant::Mean => {
                let mut heads: Vec<&Vec<f64>> = pred_w.unimodal.iter().collect();
                heads.push(&pred_w.fused);
                let passing: Vec<&Vec<f64>> = heads
                    .into_iter()
                    .filter(|p| {
                        let a = argmax(p);
                        p[a] > tau
                    })
                    .collect();
                let c = pred_w.fused.len();
                let mut avg = vec![0.0; c];
                for p in &passing {
                    for k in 0..c {
                        avg[k] += p[k] / passing.len() as f64;
                    }
                }
                let label = argmax(&avg);
                if avg[label] > tau && !passing.is_empty() {
                    GateDecision {
                        tag: GateTag::Consensus,
                        pseudo_label: Some(label),
                        fused_confidence,
                    }
                } else {
                    decision(false, y_hat)
                }
            }
            GateVariant::FusedOnly => decision(true, y_hat),
        }
    }

    /// Exhaustive fixture grid: 3 classes, head maxes drawn from a fixed
    /// set, every argmax placement for every head.
    pub fn exhaustive_grid(num_unimodal: usize) -> Vec<HeadProbs> {
        let maxes = [0.90, 0.94, 0.96, 0.99];
        let classes = 3usize;
        let mut heads_pool: Vec<Vec<f64>> = Vec::new();
        for &m in &maxes {
            for a in 0..classes {
                let rest = (1.0 - m) / (classes - 1) as f64;
                let mut p = vec![rest; classes];
                p[a] = m;
                heads_pool.push(p);
            }
        }
        let n = heads_pool.len();
        let total_heads = num_unimodal + 1;
        let mut out = Vec::new();
        let mut idx = vec![0usize; total_heads];
        loop {
            let unimodal: Vec<Vec<f64>> = (0..num_unimodal)
                .map(|i| heads_pool[idx[i]].clone())
                .collect();
            let fused = heads_pool[idx[num_unimodal]].clone();
            out.push(HeadProbs { unimodal, fused });
            // odometer increment
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < n {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == total_heads {
                    return out;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(fused: (usize, f64), uni: &[(usize, f64)]) -> HeadProbs {
        let c = 3;
        let mk = |(a, m): (usize, f64)| {
            let rest = (1.0 - m) / (c - 1) as f64;
            let mut p = vec![rest; c];
            p[a] = m;
            p
        };
        HeadProbs {
            unimodal: uni.iter().map(|&h| mk(h)).collect(),
            fused: mk(fused),
        }
    }

    #[test]
    fn full_rule_examples() {
        let tau = 0.95;
        // fused confident at 2, video agrees confidently -> consensus
        let d = gate_sample(&probs((2, 0.96), &[(2, 0.97), (0, 0.97)]), tau, GateVariant::Full).unwrap();
        assert_eq!(d.tag, GateTag::Consensus);
        assert_eq!(d.pseudo_label, Some(2));

        // no unimodal match -> disagreement
        let d = gate_sample(&probs((2, 0.96), &[(1, 0.97), (0, 0.97)]), tau, GateVariant::Full).unwrap();
        assert_eq!(d.tag, GateTag::Disagreement);
        assert_eq!(d.pseudo_label, Some(2));

        // fused under threshold -> rejected
        let d = gate_sample(&probs((2, 0.90), &[(2, 0.97), (0, 0.97)]), tau, GateVariant::Full).unwrap();
        assert_eq!(d.tag, GateTag::Rejected);
        assert_eq!(d.pseudo_label, None);

        // matching modality not confident enough -> disagreement (rule 3)
        let d = gate_sample(&probs((2, 0.96), &[(2, 0.80), (0, 0.97)]), tau, GateVariant::Full).unwrap();
        assert_eq!(d.tag, GateTag::Disagreement);
        assert_eq!(d.pseudo_label, Some(2));
    }

    #[test]
    fn empty_batch_has_zero_utilization() {
        let (d, u) = gate_batch(&[], 0.95, GateVariant::Full).unwrap();
        assert!(d.is_empty());
        assert_eq!(u, 0.0);
    }

    #[test]
    fn utilization_is_accepted_fraction() {
        let batch = vec![
            probs((2, 0.96), &[(2, 0.97), (0, 0.97)]), // consensus
            probs((2, 0.96), &[(1, 0.97), (0, 0.97)]), // disagreement
            probs((2, 0.90), &[(2, 0.97), (0, 0.97)]), // rejected
        ];
        let (_, u) = gate_batch(&batch, 0.95, GateVariant::Full).unwrap();
        assert!((u - 2.0 / 3.0).abs() < 1e-12);

        // fused-only: the disagreement case becomes consensus, rejected stays out
        let (d, u) = gate_batch(&batch, 0.95, GateVariant::FusedOnly).unwrap();
        assert_eq!(d[1].tag, GateTag::Consensus);
        assert!((u - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tau_out_of_range_rejected() {
        let p = probs((0, 0.99), &[(0, 0.99)]);
        assert!(gate_sample(&p, 1.0, GateVariant::Full).is_err());
        assert!(gate_sample(&p, 0.0, GateVariant::Full).is_err());
    }

    #[test]
    fn invalid_distribution_rejected() {
        let p = HeadProbs {
            unimodal: vec![vec![0.5, 0.7]],
            fused: vec![0.5, 0.5],
        };
        assert!(matches!(
            gate_sample(&p, 0.95, GateVariant::Full),
            Err(GateError::InvalidDistribution { head: 0, .. })
        ));
    }

    #[test]
    fn oracle_agreement_on_exhaustive_grid() {
        let grid = oracle::exhaustive_grid(2);
        for tau in [0.92, 0.95] {
            for variant in [
                GateVariant::Full,
                GateVariant::Mean,
                GateVariant::Any2,
                GateVariant::Strict,
                GateVariant::FusedOnly,
            ] {
                for p in &grid {
                    let got = gate_sample(p, tau, variant).unwrap();
                    let want = oracle::gate_sample(p, tau, variant);
                    assert_eq!(got, want, "variant {variant:?} tau {tau} preds {p:?}");
                }
            }
        }
    }

    #[test]
    fn raising_tau_never_promotes_rejected() {
        let grid = oracle::exhaustive_grid(2);
        for p in &grid {
            for variant in [
                GateVariant::Full,
                GateVariant::Mean,
                GateVariant::Any2,
                GateVariant::Strict,
                GateVariant::FusedOnly,
            ] {
                let low = gate_sample(p, 0.93, variant).unwrap();
                let high = gate_sample(p, 0.97, variant).unwrap();
                if low.tag == GateTag::Rejected {
                    assert_eq!(high.tag, GateTag::Rejected);
                }
            }
        }
    }

    #[test]
    fn strict_subset_of_full_subset_of_confident() {
        let grid = oracle::exhaustive_grid(2);
        for p in &grid {
            let strict = gate_sample(p, 0.95, GateVariant::Strict).unwrap();
            let full = gate_sample(p, 0.95, GateVariant::Full).unwrap();
            if strict.tag == GateTag::Consensus {
                assert_eq!(full.tag, GateTag::Consensus);
            }
            if full.tag == GateTag::Consensus {
                assert!(full.fused_confidence > 0.95);
            }
        }
    }

    #[test]
    fn partition_property_per_variant() {
        let grid = oracle::exhaustive_grid(2);
        for p in &grid {
            let fused_confident = p.fused[argmax(&p.fused)] > 0.95;
            for variant in [GateVariant::Full, GateVariant::Mean, GateVariant::Any2, GateVariant::Strict] {
                let d = gate_sample(p, 0.95, variant).unwrap();
                assert_eq!(d.accepted(), fused_confident);
            }
        }
    }

    #[test]
    fn logit_scaling_preserves_pseudo_label() {
        // scaling all logits by a positive constant sharpens or flattens the
        // softmax but never moves the argmax
        let logits: Vec<Vec<f64>> = vec![
            vec![2.0, -1.0, 0.5],
            vec![0.1, 0.2, 0.15],
        ];
        for scale in [0.5, 1.0, 3.0] {
            for l in &logits {
                let scaled: Vec<f64> = l.iter().map(|&v| v * scale).collect();
                let soft = |v: &[f64]| {
                    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(|x| x / s).collect::<Vec<f64>>()
                };
                assert_eq!(argmax(&soft(l)), argmax(&soft(&scaled)));
            }
        }
    }
}
