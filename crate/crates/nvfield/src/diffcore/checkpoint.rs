//! `.nvck` checkpoints: a UTF-8 JSON header (entry names, shapes, dtype, byte
//! offsets, config echo, iteration) followed by the raw little-endian arrays
//! in header order. A 4-byte magic and a little-endian `u32` header length
//! frame the JSON.

use super::tensor::{Real, Tensor};
use super::{LrGroup, ParamStore};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NVCK";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: LrGroup,
    /// Byte offset into the payload that follows the header.
    pub offset: u64,
    /// Payload length in bytes.
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub iteration: u64,
    pub entries: Vec<EntryMeta>,
    /// Echo of the config that produced this checkpoint.
    pub config: serde_json::Value,
    /// Structural metadata needed to rebuild models (schedules, resolutions).
    pub model: serde_json::Value,
}

pub fn save_checkpoint<R: Real>(
    path: &Path,
    store: &ParamStore<R>,
    iteration: u64,
    config: serde_json::Value,
    model: serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for e in store.entries() {
        let len = (e.value.numel() * R::BYTE_WIDTH) as u64;
        entries.push(EntryMeta {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            group: e.group,
            offset,
            len,
        });
        offset += len;
    }
    let header = CheckpointHeader {
        version: 1,
        dtype: R::DTYPE.to_string(),
        iteration,
        entries,
        config,
        model,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Invalid(format!("header encode: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;
    let mut buf = Vec::with_capacity(1 << 16);
    for e in store.entries() {
        buf.clear();
        for &x in e.value.data() {
            x.to_le_bytes(&mut buf);
        }
        file.write_all(&buf)?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<(ParamStore<R>, CheckpointHeader)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|_| Error::Format {
        offset: 0,
        msg: "truncated checkpoint magic".into(),
    })?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(|_| Error::Format {
        offset: 4,
        msg: "truncated header length".into(),
    })?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(|_| Error::Format {
        offset: 8,
        msg: "truncated header".into(),
    })?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json).map_err(|e| {
        Error::Format {
            offset: 8,
            msg: format!("header decode: {e}"),
        }
    })?;
    if header.dtype != R::DTYPE {
        return Err(Error::Invalid(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            R::DTYPE
        )));
    }

    let payload_base = 8 + header_len;
    let mut store = ParamStore::new();
    let mut expected_offset = 0u64;
    for meta in &header.entries {
        if meta.offset != expected_offset {
            return Err(Error::Format {
                offset: payload_base + meta.offset as usize,
                msg: format!("entry `{}` offset {} out of order", meta.name, meta.offset),
            });
        }
        let numel: usize = meta.shape.iter().product();
        if meta.len as usize != numel * R::BYTE_WIDTH {
            return Err(Error::Format {
                offset: payload_base + meta.offset as usize,
                msg: format!("entry `{}` length {} vs shape {:?}", meta.name, meta.len, meta.shape),
            });
        }
        let mut bytes = vec![0u8; meta.len as usize];
        file.read_exact(&mut bytes).map_err(|_| Error::Format {
            offset: payload_base + meta.offset as usize,
            msg: format!("truncated payload for entry `{}`", meta.name),
        })?;
        let data: Vec<R> = bytes
            .chunks_exact(R::BYTE_WIDTH)
            .map(R::from_le_slice)
            .collect();
        store.insert(&meta.name, Tensor::new(meta.shape.clone(), data), meta.group)?;
        expected_offset += meta.len;
    }
    Ok((store, header))
}
