//! EMA class prototypes per (modality, class, domain), cross-domain
//! averages, and assembly of the prototype alignment loss over original
//! and translated features.

use thiserror::Error;

use crate::diffcore::{NodeId, ParamMap, Tensor};
use crate::losses::{LossBuilder, LossError, ViewSelection};

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("feature dim {got} does not match modality {modality}'s prototype dim {expected}")]
    DimMismatch {
        modality: usize,
        expected: usize,
        got: usize,
    },
    #[error("cell index ({0}, {1}, {2}) out of range")]
    CellOutOfRange(usize, usize, usize),
}

/// EMA prototype store. Uninitialized cells are never read by the loss;
/// their terms are skipped.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    num_modalities: usize,
    num_classes: usize,
    num_domains: usize,
    feature_dims: Vec<usize>,
    pub alpha: f64,
    cells: Vec<Option<Vec<f64>>>,
}

impl PrototypeBank {
    pub fn new(
        num_modalities: usize,
        num_classes: usize,
        num_domains: usize,
        feature_dims: Vec<usize>,
        alpha: f64,
    ) -> Self {
        assert!((0.0..1.0).contains(&alpha));
        assert_eq!(feature_dims.len(), num_modalities);
        PrototypeBank {
            num_modalities,
            num_classes,
            num_domains,
            feature_dims,
            alpha,
            cells: vec![None; num_modalities * num_classes * num_domains],
        }
    }

    fn index(&self, m: usize, c: usize, k: usize) -> Result<usize, ProtoError> {
        if m >= self.num_modalities || c >= self.num_classes || k >= self.num_domains {
            return Err(ProtoError::CellOutOfRange(m, c, k));
        }
        Ok((m * self.num_classes + c) * self.num_domains + k)
    }

    pub fn get(&self, m: usize, c: usize, k: usize) -> Option<&[f64]> {
        let i = self.index(m, c, k).ok()?;
        self.cells[i].as_deref()
    }

    /// Blend each touched cell toward its batch mean; first touch
    /// initializes the cell to the mean exactly. Features must be
    /// gradient-isolated values.
    pub fn ema_update(
        &mut self,
        labeled_features: &[(usize, usize, usize, Vec<f64>)],
    ) -> Result<(), ProtoError> {
        use std::collections::BTreeMap;
        let mut groups: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
        for (m, c, k, f) in labeled_features {
            let expected = self.feature_dims[*m];
            if f.len() != expected {
                return Err(ProtoError::DimMismatch {
                    modality: *m,
                    expected,
                    got: f.len(),
                });
            }
            let i = self.index(*m, *c, *k)?;
            let entry = groups.entry(i).or_insert_with(|| (0, vec![0.0; f.len()]));
            entry.0 += 1;
            for (s, &v) in entry.1.iter_mut().zip(f) {
                *s += v;
            }
        }
        for (i, (count, sum)) in groups {
            let mean: Vec<f64> = sum.into_iter().map(|v| v / count as f64).collect();
            match &mut self.cells[i] {
                Some(cell) => {
                    for (c, &b) in cell.iter_mut().zip(&mean) {
                        *c = self.alpha * *c + (1.0 - self.alpha) * b;
                    }
                }
                slot => *slot = Some(mean),
            }
        }
        Ok(())
    }

    /// Mean prototype over the initialized cells of all other domains;
    /// absent when no other domain has been initialized.
    pub fn cross_domain_avg(&self, m: usize, c: usize, k: usize) -> Option<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        let mut n = 0usize;
        for other in 0..self.num_domains {
            if other == k {
                continue;
            }
            if let Some(p) = self.get(m, c, other) {
                match &mut acc {
                    Some(a) => {
                        for (x, &v) in a.iter_mut().zip(p) {
                            *x += v;
                        }
                    }
                    slot => *slot = Some(p.to_vec()),
                }
                n += 1;
            }
        }
        acc.map(|a| a.into_iter().map(|v| v / n as f64).collect())
    }

    /// Serialize initialized cells as named buffers for checkpointing.
    pub fn to_params(&self) -> ParamMap {
        let mut out = ParamMap::new();
        for m in 0..self.num_modalities {
            for c in 0..self.num_classes {
                for k in 0..self.num_domains {
                    if let Some(p) = self.get(m, c, k) {
                        out.insert(
                            format!("proto.m{m}.c{c}.k{k}"),
                            Tensor::vector(p.to_vec()),
                        );
                    }
                }
            }
        }
        out
    }

    pub fn restore_from_params(&mut self, params: &ParamMap) -> Result<(), ProtoError> {
        for m in 0..self.num_modalities {
            for c in 0..self.num_classes {
                for k in 0..self.num_domains {
                    if let Some(t) = params.get(&format!("proto.m{m}.c{c}.k{k}")) {
                        let i = self.index(m, c, k)?;
                        self.cells[i] = Some(t.data().to_vec());
                    }
                }
            }
        }
        Ok(())
    }
}

/// Variant switches for the prototype alignment loss.
#[derive(Debug, Clone, Copy)]
pub struct CmpaSwitches {
    /// Keep the cross-domain average distance (off = Intra-Domain).
    pub cross_domain: bool,
    /// Keep the translated-feature terms (off = Intra-Modal).
    pub translated: bool,
    pub views: ViewSelection,
}

impl Default for CmpaSwitches {
    fn default() -> Self {
        CmpaSwitches {
            cross_domain: true,
            translated: true,
            views: ViewSelection::Both,
        }
    }
}

/// Feature nodes for one accepted subset; outer index is view
/// (0 = weak, 1 = strong), inner index is modality. Tensors are [n, d_m].
pub struct SubsetFeatures {
    pub original: Vec<Vec<NodeId>>,
    pub translated: Vec<Vec<NodeId>>,
    pub pseudo_labels: Vec<usize>,
    pub domains: Vec<usize>,
}

fn view_enabled(view: usize, sel: ViewSelection) -> bool {
    match view {
        0 => sel.uses_weak(),
        _ => sel.uses_strong(),
    }
}

/// Unnormalized alignment sum over one subset; the caller divides by the
/// full accepted-set size. Each squared distance is averaged over feature
/// coordinates so the term's scale is independent of d_m. Prototype
/// targets are gradient-isolated constants; a sample whose target is
/// absent contributes nothing (the target falls back to the feature's own
/// detached value, making both the distance and its gradient zero).
pub fn cmpa_sum(
    lb: &mut LossBuilder<'_>,
    bank: &PrototypeBank,
    subset: &SubsetFeatures,
    switches: CmpaSwitches,
) -> Result<NodeId, LossError> {
    let n = subset.pseudo_labels.len();
    let mut acc = lb.zero();
    if n == 0 {
        return Ok(acc);
    }
    for view in 0..2 {
        if !view_enabled(view, switches.views) {
            continue;
        }
        let groups: &[Vec<NodeId>] = if switches.translated {
            &[subset.original[view].clone(), subset.translated[view].clone()]
        } else {
            &[subset.original[view].clone()]
        };
        for features in groups.iter() {
            for (m, &z) in features.iter().enumerate() {
                let d = *lb.tape.shape(z).last().unwrap();
                let mut mu_rows = Vec::with_capacity(n * d);
                let mut bar_rows = Vec::with_capacity(n * d);
                for i in 0..n {
                    let (y, k) = (subset.pseudo_labels[i], subset.domains[i]);
                    let fallback = lb.tape.value(z).row(i).to_vec();
                    match bank.get(m, y, k) {
                        Some(p) => mu_rows.extend_from_slice(p),
                        None => mu_rows.extend_from_slice(&fallback),
                    }
                    match bank.cross_domain_avg(m, y, k) {
                        Some(p) if switches.cross_domain => bar_rows.extend_from_slice(&p),
                        _ => bar_rows.extend_from_slice(&fallback),
                    }
                }
                let mu = Tensor::new(vec![n, d], mu_rows).expect("target rows shaped");
                let bar = Tensor::new(vec![n, d], bar_rows).expect("target rows shaped");
                let term = lb.align_pair_sum(z, mu, bar)?;
                acc = lb.add_scaled(acc, term, 1.0 / d as f64)?;
            }
        }
    }
    Ok(acc)
}
