// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk formats: activation corpora, checkpoints, label sidecars and the
//! flat run configuration. `FORMATS.md` at the repository root documents
//! every byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ModelConfig, PolySaeParams, Ranks, TENSOR_NAMES};
use crate::sparsify::{default_matryoshka_prefixes, Sparsifier};
use crate::synth::ScenarioConfig;
use crate::train::{OptimizerState, TrainConfig};

pub const CORPUS_MAGIC: &[u8; 8] = b"PSAEACT1";
pub const CORPUS_VERSION: u32 = 1;
pub const CORPUS_HEADER_BYTES: usize = 24;

/// Activations exactly as stored: `n × d` row-major 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusF32 {
    pub d: usize,
    pub n: usize,
    pub data: Vec<f32>,
}

impl CorpusF32 {
    /// Narrows to 32 bits (round to nearest).
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            d: m.cols(),
            n: m.rows(),
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Widening, exact.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.n, self.d, self.data.iter().map(|&v| v as f64).collect())
            .expect("corpus shape")
    }
}

pub fn encode_corpus(c: &CorpusF32) -> Result<Vec<u8>> {
    if c.d == 0 {
        return Err(Error::Format("corpus has d = 0".into()));
    }
    if c.data.len() != c.n * c.d {
        return Err(Error::Format(format!(
            "corpus payload has {} values, header says {} x {}",
            c.data.len(),
            c.n,
            c.d
        )));
    }
    let d = u32::try_from(c.d).map_err(|_| Error::Format(format!("d = {} exceeds u32", c.d)))?;
    let mut out = Vec::with_capacity(CORPUS_HEADER_BYTES + 4 * c.data.len());
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&(c.n as u64).to_le_bytes());
    for v in &c.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_corpus(bytes: &[u8]) -> Result<CorpusF32> {
    if bytes.len() < CORPUS_HEADER_BYTES {
        return Err(Error::Format(format!(
            "truncated header: expected {CORPUS_HEADER_BYTES} bytes, found {}",
            bytes.len()
        )));
    }
    if &bytes[..8] != CORPUS_MAGIC {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(CORPUS_MAGIC),
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CORPUS_VERSION {
        return Err(Error::Format(format!("unsupported corpus version {version}")));
    }
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if d == 0 {
        return Err(Error::Format("corpus has d = 0".into()));
    }
    let expected = (n as u128) * (d as u128) * 4;
    let found = (bytes.len() - CORPUS_HEADER_BYTES) as u128;
    if found < expected {
        return Err(Error::Format(format!(
            "truncated payload: expected {expected} bytes for {n} x {d}, found {found}"
        )));
    }
    if found > expected {
        return Err(Error::Format(format!(
            "trailing data: expected {expected} payload bytes for {n} x {d}, found {found}"
        )));
    }
    let data = bytes[CORPUS_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(CorpusF32 {
        d,
        n: n as usize,
        data,
    })
}

pub fn write_corpus_f32(path: &Path, c: &CorpusF32) -> Result<()> {
    let bytes = encode_corpus(c)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_corpus_f32(path: &Path) -> Result<CorpusF32> {
    decode_corpus(&fs::read(path)?)
}

/// Writes a corpus, narrowing every value to 32 bits.
pub fn write_corpus(path: &Path, m: &Matrix) -> Result<()> {
    write_corpus_f32(path, &CorpusF32::from_matrix(m))
}

/// Reads a corpus, widened to 64 bits.
pub fn read_corpus(path: &Path) -> Result<Matrix> {
    Ok(read_corpus_f32(path)?.to_matrix())
}

pub type Labels = BTreeMap<String, Vec<u32>>;

pub fn write_labels(path: &Path, labels: &Labels) -> Result<()> {
    let mut text = serde_json::to_string(labels)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads a labels sidecar and checks every task has `n` entries.
pub fn read_labels(path: &Path, n: usize) -> Result<Labels> {
    let labels: Labels = serde_json::from_str(&fs::read_to_string(path)?)?;
    for (task, y) in &labels {
        if y.len() != n {
            return Err(Error::Format(format!(
                "labels for {task} have length {}, corpus has {n} rows",
                y.len()
            )));
        }
    }
    Ok(labels)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub const CHECKPOINT_FORMAT: &str = "polysae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const TENSOR_DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: u64,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Adam step count when moments are stored.
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub params: PolySaeParams,
    pub optimizer: Option<OptimizerState>,
}

/// Tensor order in the blob: parameters, then Adam `m`, then Adam `v`.
fn tensor_groups(c: &Checkpoint) -> Vec<(String, &PolySaeParams)> {
    let mut groups = vec![(String::new(), &c.params)];
    if let Some(opt) = &c.optimizer {
        groups.push(("adam_m.".into(), &opt.m));
        groups.push(("adam_v.".into(), &opt.v));
    }
    groups
}

pub fn save_checkpoint(dir: &Path, c: &Checkpoint) -> Result<()> {
    c.model.validate()?;
    c.params.check_shapes(&c.model)?;
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (prefix, p) in tensor_groups(c) {
        for ((name, data), shape) in p.tensors().into_iter().zip(p.shapes()) {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: [shape.0, shape.1],
                offset: blob.len() as u64,
                dtype: TENSOR_DTYPE.into(),
            });
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        step: c.step,
        model: c.model.clone(),
        train: c.train.clone(),
        optimizer_step: c.optimizer.as_ref().map(|o| o.step),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("not a checkpoint manifest: format {:?}", m.format)));
    }
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", m.version)));
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    manifest.model.validate()?;
    let blob = fs::read(dir.join(BLOB_FILE))?;

    let mut params = PolySaeParams::zeros(&manifest.model);
    let mut optimizer = manifest.optimizer_step.map(|step| OptimizerState {
        m: params.zeros_like(),
        v: params.zeros_like(),
        step,
    });
    let expected_names: Vec<String> = {
        let mut names: Vec<String> = TENSOR_NAMES.iter().map(|n| n.to_string()).collect();
        if optimizer.is_some() {
            for prefix in ["adam_m.", "adam_v."] {
                names.extend(TENSOR_NAMES.iter().map(|n| format!("{prefix}{n}")));
            }
        }
        names
    };
    let found: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    if found != expected_names {
        return Err(Error::Format(format!(
            "tensor index {found:?} does not match expected {expected_names:?}"
        )));
    }

    let shapes = params.shapes();
    let mut cursor = 0u64;
    for (n, entry) in manifest.tensors.iter().enumerate() {
        let slot = n % TENSOR_NAMES.len();
        let want = shapes[slot];
        if entry.shape != [want.0, want.1] {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?} in the manifest, config implies {:?}",
                entry.name,
                entry.shape,
                [want.0, want.1]
            )));
        }
        if entry.dtype != TENSOR_DTYPE {
            return Err(Error::Format(format!(
                "tensor {} has dtype {:?}, expected {TENSOR_DTYPE:?}",
                entry.name, entry.dtype
            )));
        }
        if entry.offset != cursor {
            return Err(Error::Format(format!(
                "tensor {} at offset {}, expected {cursor}",
                entry.name, entry.offset
            )));
        }
        let len = (want.0 * want.1) as u64 * 8;
        let end = cursor + len;
        if end > blob.len() as u64 {
            return Err(Error::Format(format!(
                "blob truncated: tensor {} needs bytes {cursor}..{end}, blob has {}",
                entry.name,
                blob.len()
            )));
        }
        let target = match n / TENSOR_NAMES.len() {
            0 => &mut params,
            1 => &mut optimizer.as_mut().unwrap().m,
            _ => &mut optimizer.as_mut().unwrap().v,
        };
        let bytes = &blob[cursor as usize..end as usize];
        for (dst, src) in target.tensors_mut()[slot].1.iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().unwrap());
        }
        cursor = end;
    }
    if cursor != blob.len() as u64 {
        return Err(Error::Format(format!(
            "blob has {} bytes, manifest accounts for {cursor}",
            blob.len()
        )));
    }
    Ok(Checkpoint {
        model: manifest.model,
        train: manifest.train,
        step: manifest.step,
        params,
        optimizer,
    })
}

/// Flat training configuration file. Keys mirror the model and training
/// config fields; `seed` drives both initialization and batch order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub d: usize,
    pub d_sae: usize,
    pub k: usize,
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
    #[serde(default = "default_sparsifier")]
    pub sparsifier: Sparsifier,
    #[serde(default)]
    pub matryoshka_prefixes: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lambda2")]
    pub lambda2_init: f64,
    #[serde(default = "default_lambda3")]
    pub lambda3_init: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_b1")]
    pub adam_beta1: f64,
    #[serde(default = "d_b2")]
    pub adam_beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_clip")]
    pub grad_clip_max_norm: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_tokens")]
    pub total_tokens: u64,
    #[serde(default = "d_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub freeze_lambdas: bool,
    #[serde(default)]
    pub grad_through_norms: bool,
}

fn default_sparsifier() -> Sparsifier {
    Sparsifier::TopK
}
fn default_lambda2() -> f64 {
    -0.5
}
fn default_lambda3() -> f64 {
    0.5
}
fn d_lr() -> f64 {
    TrainConfig::default().learning_rate
}
fn d_b1() -> f64 {
    TrainConfig::default().adam_beta1
}
fn d_b2() -> f64 {
    TrainConfig::default().adam_beta2
}
fn d_eps() -> f64 {
    TrainConfig::default().adam_eps
}
fn d_clip() -> f64 {
    TrainConfig::default().grad_clip_max_norm
}
fn d_batch() -> usize {
    TrainConfig::default().batch_size
}
fn d_tokens() -> u64 {
    TrainConfig::default().total_tokens
}
fn d_every() -> u64 {
    TrainConfig::default().checkpoint_every
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.model().validate()?;
        c.train().validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            d_sae: self.d_sae,
            k: self.k,
            ranks: Ranks {
                r1: self.r1,
                r2: self.r2,
                r3: self.r3,
            },
            sparsifier: self.sparsifier,
            matryoshka_prefixes: self
                .matryoshka_prefixes
                .clone()
                .unwrap_or_else(|| default_matryoshka_prefixes(self.d_sae)),
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            grad_clip_max_norm: self.grad_clip_max_norm,
            batch_size: self.batch_size,
            total_tokens: self.total_tokens,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
            freeze_lambdas: self.freeze_lambdas,
            grad_through_norms: self.grad_through_norms,
        }
    }
}

/// Flat synthetic-data configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(flatten)]
    pub scenario: ScenarioConfig,
    pub rows: usize,
    /// Target interaction share of activation variance; strengths stay at
    /// 1 when absent.
    #[serde(default)]
    pub interaction_energy: Option<f64>,
}

impl SynthConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
