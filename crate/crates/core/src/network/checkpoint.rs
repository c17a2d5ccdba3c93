//! Binary checkpoints: `"STPC"`, u32 version, u64 header length, a UTF-8
//! JSON header, then every parameter as little-endian f32 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, VariantSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"STPC";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub variant: VariantSpec,
    pub input_channels: usize,
    pub spatial: usize,
    pub manifest: Vec<ManifestEntry>,
}

impl Model<f32> {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            variant: self.variant.clone(),
            input_channels: self.input_channels,
            spatial: self.spatial,
            manifest: self
                .params
                .iter()
                .map(|(name, t)| ManifestEntry {
                    name: name.to_string(),
                    dims: t.dims().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.count_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |at: usize, n: usize, what: &str| -> Result<&[u8]> {
            bytes.get(at..at + n).ok_or_else(|| Error::Format {
                offset: at as u64,
                msg: format!("truncated {what}: need {n} bytes, have {}", bytes.len().saturating_sub(at)),
            })
        };
        if take(0, 4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let hlen = u64::from_le_bytes(take(8, 8, "header length")?.try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(16, hlen, "header")?)?;
        let mut model = build_model::<f32>(&header.variant, header.input_channels, header.spatial, 0)?;
        let expected = model.header().manifest;
        if expected != header.manifest {
            return Err(Error::Format {
                offset: 16,
                msg: "parameter manifest does not match the variant it names".into(),
            });
        }
        let mut at = 16 + hlen;
        for value in model.params.values_mut() {
            let n = value.numel();
            let raw = take(at, 4 * n, "parameter payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            *value = Tensor::new(value.dims().to_vec(), data)?;
            at += 4 * n;
        }
        if at != bytes.len() {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("{} trailing bytes after the last parameter", bytes.len() - at),
            });
        }
        Ok(model)
    }
}

pub fn write_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    std::fs::write(path, model.to_checkpoint_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Model<f32>> {
    Model::from_checkpoint_bytes(&std::fs::read(path)?)
}
