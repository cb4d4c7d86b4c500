//! Model persistence: a single-line JSON header describing kind, config and
//! tensor layout, a newline, then every tensor's values concatenated as raw
//! little-endian f64 bytes in header order. Round trips are bit-exact.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Dense2;

/// Value of the header's `format` field.
pub const FORMAT_NAME: &str = "rcqa.checkpoint";
/// Current container version.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

/// An in-memory checkpoint: a kind tag, an arbitrary JSON config echo, and
/// named tensors in insertion order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<(String, Dense2)>,
}

impl Checkpoint {
    /// Start a checkpoint of the given kind; `config` is stored as JSON and
    /// recovered with [`Checkpoint::config_as`].
    pub fn new(kind: impl Into<String>, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)
            .map_err(|e| Error::Checkpoint(format!("config not serializable: {e}")))?;
        Ok(Checkpoint {
            kind: kind.into(),
            config,
            tensors: Vec::new(),
        })
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config does not match expected shape: {e}")))
    }

    /// Append a named tensor. Names must be unique within the checkpoint.
    pub fn push(&mut self, name: impl Into<String>, tensor: Dense2) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    /// Look up a tensor by name.
    pub fn tensor(&self, name: &str) -> Result<&Dense2> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    /// Tensor names in payload order.
    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorMeta {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let header_line =
            serde_json::to_string(&header).expect("header serialization cannot fail");
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(header_line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
        for (_, tensor) in &self.tensors {
            for v in tensor.values() {
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint(format!("{}: no header line", path.display())))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
        if header.format != FORMAT_NAME {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint (format {:?})",
                path.display(),
                header.format
            )));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {} (expected {})",
                path.display(),
                header.version,
                FORMAT_VERSION
            )));
        }
        let payload = &bytes[newline + 1..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.rows * t.cols * std::mem::size_of::<f64>())
            .sum();
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{}: payload holds {} bytes, header promises {}",
                path.display(),
                payload.len(),
                expected
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut offset = 0usize;
        for meta in &header.tensors {
            let count = meta.rows * meta.cols;
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                let chunk: [u8; 8] = payload[offset..offset + 8]
                    .try_into()
                    .expect("length checked above");
                values.push(f64::from_le_bytes(chunk));
                offset += 8;
            }
            let tensor = Dense2::new(meta.rows, meta.cols, values).map_err(|e| {
                Error::Checkpoint(format!(
                    "{}: tensor {:?} invalid: {e}",
                    path.display(),
                    meta.name
                ))
            })?;
            if tensors.iter().any(|(n, _): &(String, Dense2)| n == &meta.name) {
                return Err(Error::Checkpoint(format!(
                    "{}: duplicate tensor name {:?}",
                    path.display(),
                    meta.name
                )));
            }
            tensors.push((meta.name.clone(), tensor));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            tensors,
        })
    }
}
