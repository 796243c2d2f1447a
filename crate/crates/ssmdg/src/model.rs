//! Network family: per-modality encoder MLPs, unimodal classifier heads, a
//! fusion head over concatenated features, and pairwise cross-modal
//! translators, plus missing-modality feature synthesis.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{NodeId, OpKind, ParamMap, Tape, Tensor};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input dim {got} does not match modality {modality}'s configured dim {expected}")]
    InputDim {
        modality: usize,
        expected: usize,
        got: usize,
    },
    #[error("translator endpoints must differ, got {0} -> {0}")]
    SelfTranslation(usize),
    #[error("no available modalities to impute from")]
    NoAvailableModalities,
    #[error("missing feature for modality {0}; impute before predicting")]
    MissingFeature(usize),
    #[error("diff engine: {0}")]
    Diff(#[from] crate::diffcore::DiffError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_modalities: usize,
    pub input_dims: Vec<usize>,
    /// Per-modality feature dim d_m.
    pub feature_dims: Vec<usize>,
    pub encoder_hidden: usize,
    pub translator_hidden: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_modalities: 2,
            input_dims: vec![16, 16],
            feature_dims: vec![32, 32],
            encoder_hidden: 64,
            translator_hidden: 64,
            num_classes: 7,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn fused_input_dim(&self) -> usize {
        self.feature_dims.iter().sum()
    }
}

/// All trainable parameters, keyed by deterministic names.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamMap,
}

fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize, shape: Vec<usize>) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape consistent")
}

impl Model {
    /// Deterministic initialization: fan-in-scaled uniform weights and
    /// biases (both U(-1/sqrt(fan_in), 1/sqrt(fan_in))). Zero biases would
    /// make an all-dead ReLU row emit an exactly-zero feature vector, which
    /// parks downstream pre-activations exactly on the ReLU kink. Equal
    /// configs yield bitwise-equal parameters.
    pub fn init(config: ModelConfig) -> Model {
        let mut params = ParamMap::new();
        let mut stream_id = 0u64;
        let mut draw = |fan_in: usize, shape: Vec<usize>| {
            let mut rng = stream(config.init_seed, "init", stream_id);
            stream_id += 1;
            fan_in_uniform(&mut rng, fan_in, shape)
        };
        let m = config.num_modalities;
        for mi in 0..m {
            let (din, h, dout) = (config.input_dims[mi], config.encoder_hidden, config.feature_dims[mi]);
            params.insert(format!("enc{mi}.w1"), draw(din, vec![din, h]));
            params.insert(format!("enc{mi}.b1"), draw(din, vec![h]));
            params.insert(format!("enc{mi}.w2"), draw(h, vec![h, dout]));
            params.insert(format!("enc{mi}.b2"), draw(h, vec![dout]));
            params.insert(format!("head{mi}.w"), draw(dout, vec![dout, config.num_classes]));
            params.insert(format!("head{mi}.b"), draw(dout, vec![config.num_classes]));
        }
        params.insert(
            "fused.w".into(),
            draw(config.fused_input_dim(), vec![config.fused_input_dim(), config.num_classes]),
        );
        params.insert(
            "fused.b".into(),
            draw(config.fused_input_dim(), vec![config.num_classes]),
        );
        for from in 0..m {
            for to in 0..m {
                if from == to {
                    continue;
                }
                let (dfrom, h, dto) = (
                    config.feature_dims[from],
                    config.translator_hidden,
                    config.feature_dims[to],
                );
                params.insert(format!("tr{from}_{to}.w1"), draw(dfrom, vec![dfrom, h]));
                params.insert(format!("tr{from}_{to}.b1"), draw(dfrom, vec![h]));
                params.insert(format!("tr{from}_{to}.w2"), draw(h, vec![h, dto]));
                params.insert(format!("tr{from}_{to}.b2"), draw(h, vec![dto]));
            }
        }
        Model { config, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

/// Graph-building forward passes over a bound parameter set. One instance
/// per tape; batches are row-major [n, dim] tensors.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub ids: BTreeMap<String, NodeId>,
    pub config: ModelConfig,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, model: &Model) -> Forward<'a> {
        let ids = tape.bind_params(&model.params);
        Forward {
            tape,
            ids,
            config: model.config.clone(),
        }
    }

    /// Like `new` but records parameters as constants: values flow, no
    /// gradients. Used for gating passes and evaluation.
    pub fn frozen(tape: &'a mut Tape, model: &Model) -> Forward<'a> {
        let ids = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        Forward {
            tape,
            ids,
            config: model.config.clone(),
        }
    }

    fn affine(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId, ModelError> {
        let h = self.tape.apply(OpKind::MatMul, &[x, self.ids[w]], None)?;
        Ok(self.tape.apply(OpKind::Add, &[h, self.ids[b]], None)?)
    }

    /// Encoder MLP (affine-ReLU-affine) with RMS-normalized output for one
    /// modality batch [n, d_in]. Features live on the unit-RMS sphere so
    /// every consumer (heads, prototypes, translators) is decoupled from
    /// feature magnitude — the role batch norm plays in deep backbones.
    pub fn encode(&mut self, modality: usize, input: NodeId) -> Result<NodeId, ModelError> {
        let got = *self.tape.shape(input).last().unwrap();
        let expected = self.config.input_dims[modality];
        if got != expected {
            return Err(ModelError::InputDim {
                modality,
                expected,
                got,
            });
        }
        let h = self.affine(input, &format!("enc{modality}.w1"), &format!("enc{modality}.b1"))?;
        let h = self.tape.apply(OpKind::Relu, &[h], None)?;
        let z = self.affine(h, &format!("enc{modality}.w2"), &format!("enc{modality}.b2"))?;
        self.rms_normalize(z)
    }

    /// RMS-normalize each feature row: z / sqrt(mean(z^2) + eps). The floor
    /// keeps the map smooth near zero rows (amplification is bounded by
    /// 1/sqrt(eps)), so gradients stay finite-difference checkable.
    fn rms_normalize(&mut self, z: NodeId) -> Result<NodeId, ModelError> {
        const EPS: f64 = 1e-3;
        let d = *self.tape.shape(z).last().unwrap();
        let sq = self.tape.apply(OpKind::PowScalar, &[z], Some(2.0))?;
        let avg = self
            .tape
            .constant(Tensor::new(vec![d, 1], vec![1.0 / d as f64; d])?);
        let ms = self.tape.apply(OpKind::MatMul, &[sq, avg], None)?;
        let eps = self.tape.constant(Tensor::new(vec![1], vec![EPS])?);
        let ms = self.tape.apply(OpKind::Add, &[ms, eps], None)?;
        let inv = self.tape.apply(OpKind::PowScalar, &[ms], Some(-0.5))?;
        Ok(self.tape.apply(OpKind::RowScale, &[z, inv], None)?)
    }

    /// Softmax probabilities per head; unimodal heads in modality order,
    /// fused head last (applied to the fixed-order concatenation).
    pub fn predict_heads(&mut self, features: &[NodeId]) -> Result<Vec<NodeId>, ModelError> {
        if features.len() != self.config.num_modalities {
            return Err(ModelError::MissingFeature(features.len()));
        }
        let mut out = Vec::with_capacity(features.len() + 1);
        for (mi, &z) in features.iter().enumerate() {
            let logits = self.affine(z, &format!("head{mi}.w"), &format!("head{mi}.b"))?;
            out.push(self.tape.apply(OpKind::SoftmaxLastAxis, &[logits], None)?);
        }
        let cat = self.tape.apply(OpKind::ConcatLastAxis, features, None)?;
        let logits = self.affine(cat, "fused.w", "fused.b")?;
        out.push(self.tape.apply(OpKind::SoftmaxLastAxis, &[logits], None)?);
        Ok(out)
    }

    /// Two-layer ReLU translator mapping d_from features into d_to space,
    /// RMS-normalized so translations land on the same sphere as encoder
    /// features.
    pub fn translate(&mut self, from: usize, to: usize, feature: NodeId) -> Result<NodeId, ModelError> {
        if from == to {
            return Err(ModelError::SelfTranslation(from));
        }
        let h = self.affine(feature, &format!("tr{from}_{to}.w1"), &format!("tr{from}_{to}.b1"))?;
        let h = self.tape.apply(OpKind::Relu, &[h], None)?;
        let t = self.affine(h, &format!("tr{from}_{to}.w2"), &format!("tr{from}_{to}.b2"))?;
        self.rms_normalize(t)
    }

    /// Mean of translations into `missing` from every available modality.
    pub fn translate_into(
        &mut self,
        missing: usize,
        available: &[(usize, NodeId)],
    ) -> Result<NodeId, ModelError> {
        if available.is_empty() {
            return Err(ModelError::NoAvailableModalities);
        }
        let mut acc: Option<NodeId> = None;
        for &(from, z) in available {
            let t = self.translate(from, missing, z)?;
            acc = Some(match acc {
                None => t,
                Some(a) => self.tape.apply(OpKind::Add, &[a, t], None)?,
            });
        }
        let sum = acc.unwrap();
        Ok(self
            .tape
            .apply(OpKind::Scale, &[sum], Some(1.0 / available.len() as f64))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeMode {
    Zero,
    Translate,
}

/// Value-level forward of a batch: per-modality features and per-head
/// probabilities (unimodal heads then fused).
pub fn forward_values(
    model: &Model,
    inputs: &[Tensor],
) -> Result<(Vec<Tensor>, Vec<Tensor>), ModelError> {
    let mut tape = Tape::new();
    let mut fwd = Forward::frozen(&mut tape, model);
    let mut features = Vec::with_capacity(inputs.len());
    for (mi, x) in inputs.iter().enumerate() {
        let xid = fwd.tape.constant(x.clone());
        features.push(fwd.encode(mi, xid)?);
    }
    let probs = fwd.predict_heads(&features)?;
    Ok((
        features.iter().map(|&id| tape.value(id).clone()).collect(),
        probs.iter().map(|&id| tape.value(id).clone()).collect(),
    ))
}

/// Fused-head prediction with an optionally missing modality. Imputation
/// happens in feature space before concatenation.
pub fn predict_fused_with_missing(
    model: &Model,
    inputs: &[Option<Tensor>],
    mode: ImputeMode,
) -> Result<Tensor, ModelError> {
    let n_rows = inputs
        .iter()
        .flatten()
        .map(|t| t.rows())
        .next()
        .ok_or(ModelError::NoAvailableModalities)?;
    let mut tape = Tape::new();
    let mut fwd = Forward::frozen(&mut tape, model);
    let mut available: Vec<(usize, NodeId)> = Vec::new();
    for (mi, x) in inputs.iter().enumerate() {
        if let Some(x) = x {
            let xid = fwd.tape.constant(x.clone());
            available.push((mi, fwd.encode(mi, xid)?));
        }
    }
    let mut features = Vec::with_capacity(inputs.len());
    for (mi, x) in inputs.iter().enumerate() {
        if x.is_some() {
            features.push(available.iter().find(|(m, _)| *m == mi).unwrap().1);
        } else {
            match mode {
                ImputeMode::Zero => {
                    let z = Tensor::zeros(vec![n_rows, model.config.feature_dims[mi]]);
                    features.push(fwd.tape.constant(z));
                }
                ImputeMode::Translate => {
                    features.push(fwd.translate_into(mi, &available)?);
                }
            }
        }
    }
    let probs = fwd.predict_heads(&features)?;
    Ok(tape.value(probs[model.config.num_modalities]).clone())
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    /// name -> shape, in serialized order; model params then extra buffers.
    tensors: Vec<(String, Vec<usize>)>,
    n_model_params: usize,
}

/// Binary parameter dump plus JSON manifest at `<path>.json`. `extras`
/// carries non-trainable buffers (the prototype bank).
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    extras: &ParamMap,
) -> Result<(), ModelError> {
    let mut tensors = Vec::new();
    let mut w = BufWriter::new(File::create(path)?);
    for map in [&model.params, extras] {
        for (name, t) in map.iter() {
            tensors.push((name.clone(), t.shape().to_vec()));
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        tensors,
        n_model_params: model.params.len(),
    };
    std::fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, ParamMap), ModelError> {
    let manifest: CheckpointManifest = serde_json::from_str(
        &std::fs::read_to_string(manifest_path(path))?,
    )
    .map_err(|e| ModelError::Corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Corrupt(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut params = ParamMap::new();
    let mut extras = ParamMap::new();
    for (i, (name, shape)) in manifest.tensors.iter().enumerate() {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(shape.clone(), data)
            .map_err(|e| ModelError::Corrupt(e.to_string()))?;
        if i < manifest.n_model_params {
            params.insert(name.clone(), t);
        } else {
            extras.insert(name.clone(), t);
        }
    }
    Ok((
        Model {
            config: manifest.config,
            params,
        },
        extras,
    ))
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}
