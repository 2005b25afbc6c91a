//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `CFFCKPT\0`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then every tensor's `f32`
//! values in little-endian order, in header order. Values round-trip
//! bit-exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cff_core::data::Normalization;
use cff_core::models::{Encoder, Head, LabelPatchTable, LayerParams};
use cff_core::optim::AdamW;
use cff_core::training::{stream_seed, ExperimentConfig};
use cff_core::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"CFFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint contents: {0}")]
    Contents(String),
    #[error("{0}")]
    Model(#[from] cff_core::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// A trained run: encoder, per-layer optimizer states, and the inference
/// extras of its algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Epoch the encoder parameters come from.
    pub epoch: usize,
    pub encoder: Encoder<f32>,
    pub optimizers: Vec<AdamW<f32>>,
    pub table: Option<LabelPatchTable<f32>>,
    pub head: Option<Head<f32>>,
    /// Input statistics fitted on the training split.
    pub normalization: Normalization,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    path: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    epoch: usize,
    optimizer_steps: Vec<u64>,
    tensors: Vec<TensorEntry>,
}

fn named<'a>(path: String, t: &'a Tensor<f32>, out: &mut Vec<(String, &'a Tensor<f32>)>) {
    out.push((path, t));
}

fn take(values: &mut HashMap<String, Tensor<f32>>, path: &str) -> Result<Tensor<f32>> {
    values
        .remove(path)
        .ok_or_else(|| CheckpointError::Contents(format!("missing tensor {path}")))
}

impl Checkpoint {
    fn tensors<'a>(&'a self, norm: &'a [Tensor<f32>; 2]) -> Vec<(String, &'a Tensor<f32>)> {
        let mut out = Vec::new();
        named("normalization.mean".into(), &norm[0], &mut out);
        named("normalization.std".into(), &norm[1], &mut out);
        for (l, (layer, opt)) in self.encoder.layers.iter().zip(&self.optimizers).enumerate() {
            let prefix = format!("layer{}", l + 1);
            let (m, v) = opt.moments();
            for (i, (path, name)) in layer.paths(&prefix).into_iter().zip(layer.names()).enumerate() {
                named(path, &layer.tensors()[i], &mut out);
                named(format!("{prefix}.adam_m.{name}"), &m[i], &mut out);
                named(format!("{prefix}.adam_v.{name}"), &v[i], &mut out);
            }
        }
        if let Some(t) = &self.table {
            named("label_table".into(), t.tensor(), &mut out);
        }
        if let Some(h) = &self.head {
            named("head.w".into(), &h.w, &mut out);
            named("head.b".into(), &h.b, &mut out);
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.optimizers.len() != self.encoder.layers.len() {
            return Err(CheckpointError::Contents("one optimizer per layer required".into()));
        }
        let c = self.normalization.mean.len();
        let norm = [
            Tensor::new(vec![c], self.normalization.mean.clone())?,
            Tensor::new(vec![c], self.normalization.std.clone())?,
        ];
        let tensors = self.tensors(&norm);
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            optimizer_steps: self.optimizers.iter().map(AdamW::steps).collect(),
            tensors: tensors
                .iter()
                .map(|(p, t)| TensorEntry {
                    path: p.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &tensors {
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        header
            .config
            .validate()
            .map_err(|e| CheckpointError::Contents(format!("stored config: {e}")))?;

        let mut values = HashMap::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            values.insert(entry.path.clone(), Tensor::new(entry.shape.clone(), data)?);
        }

        let cfg = &header.config;
        let template = Encoder::<f32>::init(
            cfg.model,
            cfg.dataset.image_shape(),
            cfg.label_mode(),
            stream_seed(cfg.seed, "init"),
        )?;
        if header.optimizer_steps.len() != template.layers.len() {
            return Err(CheckpointError::Contents("optimizer count differs from layer count".into()));
        }
        let mut layers = Vec::new();
        let mut optimizers = Vec::new();
        for (l, tmpl) in template.layers.iter().enumerate() {
            let prefix = format!("layer{}", l + 1);
            let mut params = Vec::new();
            let mut m = Vec::new();
            let mut v = Vec::new();
            for name in tmpl.names() {
                params.push(take(&mut values, &format!("{prefix}.{name}"))?);
                m.push(take(&mut values, &format!("{prefix}.adam_m.{name}"))?);
                v.push(take(&mut values, &format!("{prefix}.adam_v.{name}"))?);
            }
            let layer = LayerParams::from_parts(tmpl, params)?;
            let mut opt = AdamW::new(cfg.optimizer, layer.tensors());
            opt.restore(header.optimizer_steps[l], m, v)?;
            layers.push(layer);
            optimizers.push(opt);
        }
        let normalization = Normalization {
            mean: take(&mut values, "normalization.mean")?.data().to_vec(),
            std: take(&mut values, "normalization.std")?.data().to_vec(),
        };
        if normalization.mean.len() != cfg.dataset.image_shape().channels || normalization.std.len() != normalization.mean.len() {
            return Err(CheckpointError::Contents("normalization does not match the image channels".into()));
        }
        let table = match values.remove("label_table") {
            Some(t) => Some(LabelPatchTable::from_tensor(t)?),
            None => None,
        };
        let head = match (values.remove("head.w"), values.remove("head.b")) {
            (Some(w), Some(b)) => Some(Head { w, b }),
            (None, None) => None,
            _ => return Err(CheckpointError::Contents("incomplete head".into())),
        };
        if let Some(extra) = values.keys().next() {
            return Err(CheckpointError::Contents(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            config: header.config.clone(),
            epoch: header.epoch,
            encoder: Encoder { layers, ..template },
            optimizers,
            table,
            head,
            normalization,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
