//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "LPIPSCKP"
//! version    u32       CHECKPOINT_VERSION
//! header_len u64       length of the JSON header in bytes
//! header     JSON      {"kind", "metadata", "arrays": [{"name", "shape"}, ...]}
//! payload    f64 LE    every array in header order, row-major
//! ```
//!
//! The file must end exactly after the payload. Metric models use kind
//! `"metric"`, classifiers `"classifier"`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ConvParams, LayerSpec};
use crate::error::{Error, Result};
use crate::metric::{CalibrationHead, Flavor, MetricModel, MetricWeights, Provenance};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LPIPSCKP";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = self.arrays.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(corrupt("header length exceeds file size"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
        let mut payload = &body[hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let n: usize = entry.shape.iter().product();
            if payload.len() < n * 8 {
                return Err(Error::CorruptCheckpoint(format!(
                    "payload truncated in array `{}`",
                    entry.name
                )));
            }
            let data = payload[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[n * 8..];
            arrays.push((entry.name, Tensor::new(entry.shape, data)));
        }
        if !payload.is_empty() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Removes and returns the array called `name`.
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let i = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing array `{name}`")))?;
        Ok(self.arrays.remove(i).1)
    }
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct MetricMeta {
    flavor: Flavor,
    provenance: Provenance,
    backbone: BackboneConfig,
    weight_layers: usize,
}

pub(crate) fn backbone_arrays(b: &Backbone, prefix: &str, out: &mut Vec<(String, Tensor)>) {
    for (i, p) in b.params().iter().enumerate() {
        if let Some(p) = p {
            out.push((format!("{prefix}.{i}.weight"), p.weight.clone()));
            out.push((format!("{prefix}.{i}.bias"), p.bias.clone()));
        }
    }
}

pub(crate) fn take_backbone(
    c: &mut Container,
    config: BackboneConfig,
    prefix: &str,
) -> Result<Backbone> {
    let mut params = Vec::with_capacity(config.layers.len());
    for (i, l) in config.layers.iter().enumerate() {
        params.push(match l {
            LayerSpec::Conv { .. } => Some(ConvParams {
                weight: c.take(&format!("{prefix}.{i}.weight"))?,
                bias: c.take(&format!("{prefix}.{i}.bias"))?,
            }),
            _ => None,
        });
    }
    Backbone::with_params(config, params)
}

pub fn metric_to_container(model: &MetricModel) -> Result<Container> {
    let mut arrays = Vec::new();
    backbone_arrays(&model.backbone, "backbone", &mut arrays);
    for (j, w) in model.weights.layers.iter().enumerate() {
        arrays.push((format!("weights.{j}"), Tensor::from_vec(w.clone())));
    }
    for (k, p) in model.head.params.iter().enumerate() {
        arrays.push((format!("head.{k}"), p.clone()));
    }
    let meta = MetricMeta {
        flavor: model.flavor,
        provenance: model.provenance.clone(),
        backbone: model.backbone.config().clone(),
        weight_layers: model.weights.layers.len(),
    };
    Ok(Container {
        kind: "metric".into(),
        metadata: serde_json::to_value(meta)?,
        arrays,
    })
}

pub fn metric_from_container(mut c: Container) -> Result<MetricModel> {
    if c.kind != "metric" {
        return Err(Error::CorruptCheckpoint(format!(
            "expected a metric checkpoint, found kind `{}`",
            c.kind
        )));
    }
    let meta: MetricMeta = serde_json::from_value(c.metadata.clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("bad metric metadata: {e}")))?;
    let backbone = take_backbone(&mut c, meta.backbone, "backbone")?;
    let weights = MetricWeights {
        layers: (0..meta.weight_layers)
            .map(|j| c.take(&format!("weights.{j}")).map(Tensor::into_data))
            .collect::<Result<_>>()?,
    };
    let head = CalibrationHead {
        params: (0..6)
            .map(|k| c.take(&format!("head.{k}")))
            .collect::<Result<_>>()?,
    };
    if !c.arrays.is_empty() {
        return Err(Error::CorruptCheckpoint(format!(
            "unexpected array `{}`",
            c.arrays[0].0
        )));
    }
    let model = MetricModel {
        backbone,
        weights,
        head,
        flavor: meta.flavor,
        provenance: meta.provenance,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_checkpoint(model: &MetricModel, path: &Path) -> Result<()> {
    metric_to_container(model)?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<MetricModel> {
    metric_from_container(Container::load(path)?)
}

/// Backbone of a metric checkpoint.
pub fn load_backbone(path: &Path) -> Result<Backbone> {
    Ok(load_checkpoint(path)?.backbone)
}
