//! Shared on-disk container: a magic/version preamble, a JSON header naming
//! every float record (name, shape, plus free-form metadata), and a raw
//! little-endian float payload at 32- or 64-bit width.
//!
//! Checkpoints and datasets both use this container; parse failures report
//! the byte offset at which decoding stopped.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::{AdapterParams, Orientation};
use crate::encoder::{BranchKind, EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::model::DualEncoderModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ASYMMOE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl Precision {
    fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordDecl {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    precision: Precision,
    records: Vec<RecordDecl>,
    meta: Value,
}

/// An in-memory container: named tensors plus free-form JSON metadata.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub precision: Precision,
    pub meta: Value,
    pub records: Vec<(String, Tensor)>,
}

impl Container {
    pub fn record(&self, name: &str) -> Result<&Tensor> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Parse {
                offset: 0,
                message: format!("missing record '{name}'"),
            })
    }
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let header = Header {
        kind: container.kind.clone(),
        precision: container.precision,
        records: container
            .records
            .iter()
            .map(|(name, t)| RecordDecl {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: container.meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, tensor) in &container.records {
        match container.precision {
            Precision::F64 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Precision::F32 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + len > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                message: format!(
                    "truncated file: needed {} bytes for {} at offset {}",
                    len, what, self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(slice)
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
    };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {:?}, want {:?}", magic, MAGIC),
        });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            offset: 8,
            message: format!("unsupported format version {version}"),
        });
    }
    let header_len = u32::from_le_bytes(r.take(4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header_start = r.offset as u64;
    let header_bytes = r.take(header_len, "header")?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Parse {
        offset: header_start,
        message: format!("invalid header JSON: {e}"),
    })?;
    let mut records = Vec::with_capacity(header.records.len());
    for decl in &header.records {
        let count: usize = decl.shape.iter().product();
        let start = r.offset as u64;
        let raw = r.take(count * header.precision.bytes(), &format!("record '{}'", decl.name))?;
        let data: Vec<f64> = match header.precision {
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        let tensor = Tensor::new(decl.shape.clone(), data).map_err(|e| Error::Parse {
            offset: start,
            message: format!("record '{}': {e}", decl.name),
        })?;
        records.push((decl.name.clone(), tensor));
    }
    if r.offset != bytes.len() {
        return Err(Error::Parse {
            offset: r.offset as u64,
            message: format!("{} trailing bytes after payload", bytes.len() - r.offset),
        });
    }
    Ok(Container {
        kind: header.kind,
        precision: header.precision,
        meta: header.meta,
        records,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterMeta {
    orientation: Orientation,
    d_h: usize,
    r: usize,
    n: usize,
    alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BranchMeta {
    config: EncoderConfig,
    frozen_backbone: bool,
    adapters: Option<Vec<AdapterMeta>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    image: BranchMeta,
    text: BranchMeta,
    tau: f64,
    learn_tau: bool,
    /// Free-form provenance (training config snapshot and the like).
    extra: Value,
}

fn push_branch(records: &mut Vec<(String, Tensor)>, prefix: &str, state: &EncoderState) {
    records.push((format!("{prefix}.embed"), state.embed.clone()));
    if let Some(cls) = &state.cls {
        records.push((format!("{prefix}.cls"), cls.clone()));
    }
    for (i, block) in state.blocks.iter().enumerate() {
        records.push((format!("{prefix}.block{i}"), block.clone()));
    }
    records.push((format!("{prefix}.proj"), state.proj.clone()));
    if let Some(adapters) = &state.adapters {
        for (layer, adapter) in adapters.iter().enumerate() {
            for (name, tensor, _) in adapter.named_matrices() {
                records.push((format!("{prefix}.adapter{layer}.{name}"), tensor.clone()));
            }
        }
    }
}

fn branch_meta(state: &EncoderState) -> BranchMeta {
    BranchMeta {
        config: state.config,
        frozen_backbone: state.frozen_backbone,
        adapters: state.adapters.as_ref().map(|list| {
            list.iter()
                .map(|a| AdapterMeta {
                    orientation: a.orientation,
                    d_h: a.d_h,
                    r: a.r,
                    n: a.n,
                    alpha: a.alpha,
                })
                .collect()
        }),
    }
}

/// Serialize a full model (both branches, head scalars, configs) to `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &DualEncoderModel,
    precision: Precision,
    extra: Value,
) -> Result<()> {
    model.validate()?;
    let meta = CheckpointMeta {
        image: branch_meta(&model.image),
        text: branch_meta(&model.text),
        tau: model.tau,
        learn_tau: model.learn_tau,
        extra,
    };
    let mut records = Vec::new();
    push_branch(&mut records, "image", &model.image);
    push_branch(&mut records, "text", &model.text);
    write_container(
        path,
        &Container {
            kind: "checkpoint".to_string(),
            precision,
            meta: serde_json::to_value(&meta)?,
            records,
        },
    )
}

fn pull_branch(container: &Container, prefix: &str, meta: &BranchMeta) -> Result<EncoderState> {
    let config = meta.config;
    let embed = container.record(&format!("{prefix}.embed"))?.clone();
    let cls = match config.branch {
        BranchKind::Image => Some(container.record(&format!("{prefix}.cls"))?.clone()),
        BranchKind::Text => None,
    };
    let blocks = (0..config.layers)
        .map(|i| container.record(&format!("{prefix}.block{i}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    let proj = container.record(&format!("{prefix}.proj"))?.clone();
    let adapters = match &meta.adapters {
        Some(adapter_meta) => {
            let mut list = Vec::with_capacity(adapter_meta.len());
            for (layer, am) in adapter_meta.iter().enumerate() {
                let (down_count, up_count) = match am.orientation {
                    Orientation::OneDownManyUps => (1, am.n),
                    Orientation::ManyDownsOneUp => (am.n, 1),
                };
                let down = (0..down_count)
                    .map(|i| {
                        container
                            .record(&format!("{prefix}.adapter{layer}.down{i}"))
                            .cloned()
                    })
                    .collect::<Result<Vec<_>>>()?;
                let up = (0..up_count)
                    .map(|i| {
                        container
                            .record(&format!("{prefix}.adapter{layer}.up{i}"))
                            .cloned()
                    })
                    .collect::<Result<Vec<_>>>()?;
                let gate = container
                    .record(&format!("{prefix}.adapter{layer}.gate"))?
                    .clone();
                let params = AdapterParams {
                    orientation: am.orientation,
                    d_h: am.d_h,
                    r: am.r,
                    n: am.n,
                    alpha: am.alpha,
                    down,
                    up,
                    gate,
                };
                params.validate()?;
                list.push(params);
            }
            Some(list)
        }
        None => None,
    };
    let state = EncoderState {
        config,
        embed,
        cls,
        blocks,
        adapters,
        proj,
        frozen_backbone: meta.frozen_backbone,
    };
    state.validate()?;
    Ok(state)
}

/// Load a model saved by [`save_checkpoint`]; returns the model and the
/// free-form `extra` metadata stored with it.
pub fn load_checkpoint(path: &Path) -> Result<(DualEncoderModel, Value)> {
    let container = read_container(path)?;
    if container.kind != "checkpoint" {
        return Err(Error::Parse {
            offset: 0,
            message: format!("container kind '{}' is not a checkpoint", container.kind),
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(container.meta.clone())?;
    let model = DualEncoderModel {
        image: pull_branch(&container, "image", &meta.image)?,
        text: pull_branch(&container, "text", &meta.text)?,
        tau: meta.tau,
        learn_tau: meta.learn_tau,
    };
    model.validate()?;
    Ok((model, meta.extra))
}
