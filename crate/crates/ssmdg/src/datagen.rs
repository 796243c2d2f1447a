//! Deterministic synthetic multi-domain multimodal benchmark.
//!
//! Domains share one latent class structure (shared P(Y|X)) and differ only
//! by a per-domain affine transform of the modality inputs (covariate
//! shift). Weak/strong views stand in for the augmentation pipeline.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;

mod io;
pub use io::{import_datasets, export_datasets};

/// Per-modality latent view size. Each modality observes `LATENT_BLOCK`
/// latent coordinates, a `modality_correlation` fraction of which are
/// shared across modalities.
const LATENT_BLOCK: usize = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("could not place {placed} of {requested} class anchors at separation {separation} after {attempts} attempts")]
    InfeasibleSeparation {
        requested: usize,
        placed: usize,
        separation: f64,
        attempts: usize,
    },
    #[error("requested {requested} labeled samples but only {available} generated for class {class} in domain {domain}")]
    NotEnoughSamples {
        requested: usize,
        available: usize,
        class: usize,
        domain: usize,
    },
    #[error("target domain index {0} out of range for {1} domains")]
    TargetOutOfRange(usize, usize),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset file corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub num_modalities: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub input_dims: Vec<usize>,
    pub class_separation: f64,
    pub domain_shift_scale: f64,
    pub modality_correlation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            num_modalities: 2,
            num_classes: 7,
            num_domains: 3,
            input_dims: vec![16, 16],
            class_separation: 3.0,
            domain_shift_scale: 1.0,
            modality_correlation: 0.5,
            noise_sigma: 0.35,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: &str| Err(DataError::InvalidSpec(msg.to_string()));
        if self.num_modalities < 2 {
            return fail("num_modalities must be >= 2");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2");
        }
        if self.num_domains < 2 {
            return fail("num_domains must be >= 2");
        }
        if self.input_dims.len() != self.num_modalities {
            return fail("input_dims length must equal num_modalities");
        }
        if self.input_dims.iter().any(|&d| d == 0) {
            return fail("input_dims must be positive");
        }
        if !(self.class_separation > 0.0) {
            return fail("class_separation must be > 0");
        }
        if !(self.domain_shift_scale >= 0.0) {
            return fail("domain_shift_scale must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.modality_correlation) {
            return fail("modality_correlation must be in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be >= 0");
        }
        Ok(())
    }
}

/// Dense matrix in row-major order; small enough that plain loops suffice.
#[derive(Debug, Clone)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Mat { rows: n, cols: n, data }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
        }
        out
    }

    /// Spectral norm estimate by power iteration (deterministic start).
    fn spectral_norm(&self) -> f64 {
        let mut v = vec![1.0 / (self.cols as f64).sqrt(); self.cols];
        let mut norm = 0.0;
        for _ in 0..50 {
            // v <- A^T A v, normalized
            let av = self.apply(&v);
            let mut atav = vec![0.0; self.cols];
            for i in 0..self.rows {
                for j in 0..self.cols {
                    atav[j] += self.data[i * self.cols + j] * av[i];
                }
            }
            let n = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return 0.0;
            }
            for (vj, &aj) in v.iter_mut().zip(&atav) {
                *vj = aj / n;
            }
            norm = n.sqrt();
        }
        norm
    }
}

/// Frozen generative description of one benchmark task.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    /// Class anchors in the full latent space.
    anchors: Vec<Vec<f64>>,
    /// Per-modality latent coordinate selection (length LATENT_BLOCK).
    coord_maps: Vec<Vec<usize>>,
    /// Per-modality mixing from the latent view into input space.
    mixing: Vec<Mat>,
    /// Per (domain, modality) affine transform; domain 0 is the identity.
    domain_mats: Vec<Vec<Mat>>,
    domain_offsets: Vec<Vec<Vec<f64>>>,
}

/// One multimodal sample; `id` is globally unique across domains.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub domain: usize,
    pub inputs: Vec<Vec<f64>>,
}

/// Labeled + unlabeled pools for one domain. Hidden labels of the
/// unlabeled pool are reachable only through the metrics accessor.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub labeled: Vec<(Sample, usize)>,
    pub unlabeled: Vec<Sample>,
    hidden_labels: Vec<usize>,
}

impl DomainDataset {
    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    /// Ground-truth labels of the unlabeled pool. For diagnostics and
    /// evaluation only; the training losses never see these.
    pub fn hidden_labels_for_metrics(&self) -> &[usize] {
        &self.hidden_labels
    }

    pub(crate) fn from_parts(
        domain_id: usize,
        labeled: Vec<(Sample, usize)>,
        unlabeled: Vec<Sample>,
        hidden_labels: Vec<usize>,
    ) -> Self {
        DomainDataset {
            domain_id,
            labeled,
            unlabeled,
            hidden_labels,
        }
    }
}

/// Fully labeled evaluation pool for a held-out target domain.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub domain_id: usize,
    pub samples: Vec<(Sample, usize)>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum LabelBudget {
    /// Absolute labeled count per class per domain.
    Count(usize),
    /// Fraction of each class's generated pool, e.g. 0.05.
    Fraction(f64),
}

pub fn make_task(spec: &TaskSpec) -> Result<SyntheticTask, DataError> {
    spec.validate()?;
    let m = spec.num_modalities;
    let shared = ((spec.modality_correlation * LATENT_BLOCK as f64).round() as usize).min(LATENT_BLOCK);
    let private = LATENT_BLOCK - shared;
    let latent_total = shared + m * private;

    // coordinate layout: [shared | private_0 | private_1 | ...]
    let coord_maps: Vec<Vec<usize>> = (0..m)
        .map(|mi| {
            let mut v: Vec<usize> = (0..shared).collect();
            v.extend(shared + mi * private..shared + (mi + 1) * private);
            v
        })
        .collect();

    let anchors = place_anchors(spec, latent_total.max(1))?;

    let mut mixing = Vec::with_capacity(m);
    for mi in 0..m {
        let mut rng = stream(spec.seed, "mixing", mi as u64);
        let rows = spec.input_dims[mi];
        let scale = 1.0 / (LATENT_BLOCK as f64).sqrt();
        let data: Vec<f64> = (0..rows * LATENT_BLOCK)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
            .collect();
        mixing.push(Mat {
            rows,
            cols: LATENT_BLOCK,
            data,
        });
    }

    let mut domain_mats = Vec::with_capacity(spec.num_domains);
    let mut domain_offsets = Vec::with_capacity(spec.num_domains);
    for k in 0..spec.num_domains {
        let mut mats = Vec::with_capacity(m);
        let mut offs = Vec::with_capacity(m);
        for mi in 0..m {
            let d = spec.input_dims[mi];
            if k == 0 {
                // reference domain
                mats.push(Mat::identity(d));
                offs.push(vec![0.0; d]);
                continue;
            }
            let mut rng = stream(spec.seed, "domain", (k as u64) << 16 | mi as u64);
            let mut pert = Mat {
                rows: d,
                cols: d,
                data: (0..d * d)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        g / (d as f64).sqrt()
                    })
                    .collect(),
            };
            // cap the multiplicative part so cond(I + P) stays <= 100;
            // unbounded shift lives in the offset instead
            let norm = pert.spectral_norm();
            let cap = 0.9f64.min(0.4 * spec.domain_shift_scale);
            let factor = if norm > 0.0 { cap / norm } else { 0.0 };
            for v in pert.data.iter_mut() {
                *v *= factor;
            }
            let mut mat = Mat::identity(d);
            for (a, &p) in mat.data.iter_mut().zip(&pert.data) {
                *a += p;
            }
            mats.push(mat);
            let dir: Vec<f64> = (0..d)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f64>>();
            let dn = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            offs.push(
                dir.iter()
                    .map(|&x| x / dn * spec.domain_shift_scale)
                    .collect(),
            );
        }
        domain_mats.push(mats);
        domain_offsets.push(offs);
    }

    Ok(SyntheticTask {
        spec: spec.clone(),
        anchors,
        coord_maps,
        mixing,
        domain_mats,
        domain_offsets,
    })
}

fn place_anchors(spec: &TaskSpec, latent_total: usize) -> Result<Vec<Vec<f64>>, DataError> {
    let mut rng = stream(spec.seed, "anchors", 0);
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    let max_attempts = 10_000;
    let mut attempts = 0;
    // anchor radius grows with separation so placement stays feasible
    let radius = spec.class_separation * (spec.num_classes as f64).sqrt();
    while anchors.len() < spec.num_classes {
        if attempts >= max_attempts {
            return Err(DataError::InfeasibleSeparation {
                requested: spec.num_classes,
                placed: anchors.len(),
                separation: spec.class_separation,
                attempts,
            });
        }
        attempts += 1;
        let cand: Vec<f64> = (0..latent_total)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * radius / (latent_total as f64).sqrt()
            })
            .collect();
        let ok = anchors.iter().all(|a| {
            let d2: f64 = a
                .iter()
                .zip(&cand)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            d2.sqrt() >= spec.class_separation
        });
        if ok {
            anchors.push(cand);
        }
    }
    Ok(anchors)
}

impl SyntheticTask {
    /// Raw (unaugmented) multimodal inputs for one latent draw.
    fn render(&self, latent: &[f64], domain: usize) -> Vec<Vec<f64>> {
        (0..self.spec.num_modalities)
            .map(|mi| {
                let view: Vec<f64> = self.coord_maps[mi].iter().map(|&c| latent[c]).collect();
                let base = self.mixing[mi].apply(&view);
                let mut x = self.domain_mats[domain][mi].apply(&base);
                for (xi, &o) in x.iter_mut().zip(&self.domain_offsets[domain][mi]) {
                    *xi += o;
                }
                x
            })
            .collect()
    }

    fn draw_sample(&self, domain: usize, index: u64, class: usize) -> Sample {
        let mut rng = stream(self.spec.seed, "latent", (domain as u64) << 40 | index);
        let latent: Vec<f64> = self.anchors[class]
            .iter()
            .map(|&a| {
                let g: f64 = StandardNormal.sample(&mut rng);
                a + g * self.spec.noise_sigma
            })
            .collect();
        Sample {
            id: (domain as u64) << 40 | index,
            domain,
            inputs: self.render(&latent, domain),
        }
    }

    /// Noise-free class centroid in input space for one domain; used by the
    /// reference nearest-centroid classifier.
    pub fn class_centroid(&self, class: usize, domain: usize) -> Vec<f64> {
        self.render(&self.anchors[class], domain)
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Class-balanced labeled/unlabeled split for every domain.
///
/// In count mode the per-domain pool holds `labels_per_class * C` labeled
/// plus `n_unlabeled_per_domain` unlabeled samples. In fraction mode the
/// pool size is `n_unlabeled_per_domain` and the labeled subset is the
/// stated fraction of each class's pool.
pub fn sample_split(
    task: &SyntheticTask,
    budget: LabelBudget,
    n_unlabeled_per_domain: usize,
    seed: u64,
) -> Result<Vec<DomainDataset>, DataError> {
    let c = task.spec.num_classes;
    let mut out = Vec::with_capacity(task.spec.num_domains);
    for k in 0..task.spec.num_domains {
        let pool_size = match budget {
            LabelBudget::Count(n) => n * c + n_unlabeled_per_domain,
            LabelBudget::Fraction(_) => n_unlabeled_per_domain,
        };
        // round-robin classes keep P(Y) balanced across domains
        let mut by_class: Vec<Vec<(Sample, usize)>> = vec![Vec::new(); c];
        for i in 0..pool_size {
            let y = i % c;
            by_class[y].push((task.draw_sample(k, i as u64, y), y));
        }
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        let mut hidden = Vec::new();
        for (y, mut pool) in by_class.into_iter().enumerate() {
            let take = match budget {
                LabelBudget::Count(n) => n,
                LabelBudget::Fraction(f) => (f * pool.len() as f64).round() as usize,
            };
            if take > pool.len() {
                return Err(DataError::NotEnoughSamples {
                    requested: take,
                    available: pool.len(),
                    class: y,
                    domain: k,
                });
            }
            let mut rng = stream(seed, "split", (k as u64) << 16 | y as u64);
            // Fisher-Yates; labeled subset is the prefix
            for i in (1..pool.len()).rev() {
                let j = rng.gen_range(0..=i);
                pool.swap(i, j);
            }
            for (i, (s, label)) in pool.into_iter().enumerate() {
                if i < take {
                    labeled.push((s, label));
                } else {
                    unlabeled.push(s);
                    hidden.push(label);
                }
            }
        }
        labeled.sort_by_key(|(s, _)| s.id);
        let mut zipped: Vec<(Sample, usize)> =
            unlabeled.into_iter().zip(hidden).collect();
        zipped.sort_by_key(|(s, _)| s.id);
        let (unlabeled, hidden): (Vec<_>, Vec<_>) = zipped.into_iter().unzip();
        out.push(DomainDataset::from_parts(k, labeled, unlabeled, hidden));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentStrength {
    Weak,
    Strong,
}

/// Label-preserving synthetic view of one sample.
///
/// Weak: additive noise at `noise_sigma` plus one random coordinate sign
/// flip. Strong: noise at three times `noise_sigma` plus zeroing of a
/// contiguous 25% coordinate block.
pub fn augment(
    sample: &Sample,
    strength: AugmentStrength,
    noise_sigma: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let tag = match strength {
        AugmentStrength::Weak => "aug-weak",
        AugmentStrength::Strong => "aug-strong",
    };
    sample
        .inputs
        .iter()
        .enumerate()
        .map(|(mi, x)| {
            let mut rng = stream(seed, tag, sample.id << 4 | mi as u64);
            let sigma = match strength {
                AugmentStrength::Weak => noise_sigma,
                AugmentStrength::Strong => 3.0 * noise_sigma,
            };
            let mut v: Vec<f64> = x
                .iter()
                .map(|&xi| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    xi + g * sigma
                })
                .collect();
            match strength {
                AugmentStrength::Weak => {
                    let i = rng.gen_range(0..v.len());
                    v[i] = -v[i];
                }
                AugmentStrength::Strong => {
                    let len = v.len() / 4;
                    if len > 0 {
                        let start = rng.gen_range(0..=v.len() - len);
                        for vi in &mut v[start..start + len] {
                            *vi = 0.0;
                        }
                    }
                }
            }
            v
        })
        .collect()
}

/// Leave-one-domain-out split: the target's labeled and unlabeled pools
/// merge into a fully labeled test set.
pub fn leave_one_out(
    datasets: &[DomainDataset],
    target_k: usize,
) -> Result<(Vec<DomainDataset>, TestSet), DataError> {
    if target_k >= datasets.len() {
        return Err(DataError::TargetOutOfRange(target_k, datasets.len()));
    }
    let mut sources = Vec::with_capacity(datasets.len() - 1);
    let mut test = None;
    for ds in datasets {
        if ds.domain_id == target_k {
            let mut samples: Vec<(Sample, usize)> = ds.labeled.clone();
            samples.extend(
                ds.unlabeled
                    .iter()
                    .cloned()
                    .zip(ds.hidden_labels.iter().copied()),
            );
            test = Some(TestSet {
                domain_id: target_k,
                samples,
            });
        } else {
            sources.push(ds.clone());
        }
    }
    Ok((sources, test.expect("target domain present")))
}

/// Two-sample 1-D energy distance, averaged over input coordinates of the
/// first modality. Used to verify that domain shift grows with its scale.
pub fn mean_coordinate_energy_distance(a: &[Sample], b: &[Sample]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let dims = a[0].inputs[0].len();
    let mut total = 0.0;
    for d in 0..dims {
        let xs: Vec<f64> = a.iter().map(|s| s.inputs[0][d]).collect();
        let ys: Vec<f64> = b.iter().map(|s| s.inputs[0][d]).collect();
        total += energy_distance_1d(&xs, &ys);
    }
    total / dims as f64
}

fn energy_distance_1d(x: &[f64], y: &[f64]) -> f64 {
    let mean_abs = |a: &[f64], b: &[f64]| {
        let mut s = 0.0;
        for &ai in a {
            for &bi in b {
                s += (ai - bi).abs();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    2.0 * mean_abs(x, y) - mean_abs(x, x) - mean_abs(y, y)
}

/// Fraction of strong views still classified correctly by the noise-free
/// nearest-centroid reference classifier. The generator promises this stays
/// high at default settings (label-preserving augmentation).
pub fn strong_view_label_retention(task: &SyntheticTask, n_per_class: usize, seed: u64) -> f64 {
    let c = task.spec.num_classes;
    let centroids: Vec<Vec<f64>> = (0..c).map(|y| task.class_centroid(y, 0)).collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for y in 0..c {
        for i in 0..n_per_class {
            let s = task.draw_sample(0, (y * n_per_class + i) as u64, y);
            let view = augment(&s, AugmentStrength::Strong, task.spec.noise_sigma, seed);
            let flat: Vec<f64> = view.into_iter().flatten().collect();
            let pred = centroids
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(&flat).map(|(&p, &q)| (p - q) * (p - q)).sum();
                    let db: f64 = b.iter().zip(&flat).map(|(&p, &q)| (p - q) * (p - q)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            if pred == y {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}
