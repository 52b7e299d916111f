//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (network spec, layer layout, string metadata), then the parameter
//! values as little-endian `f64`. Every field is written in a fixed order so
//! the same parameters always produce the same bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mlp::{LayerShape, NetworkSpec, ParameterSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TPOCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    layout: Vec<LayerShape>,
    metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParameterSet,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, params: ParameterSet) -> Self {
        Self {
            spec,
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.spec.clone(),
            layout: self.params.layout().to_vec(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| Error::Format("truncated version".into()))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}"
            )));
        }
        let mut long = [0u8; 8];
        r.read_exact(&mut long)
            .map_err(|_| Error::Format("truncated header length".into()))?;
        let header_len = u64::from_le_bytes(long) as usize;
        if r.len() < header_len {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..header_len])?;
        r = &r[header_len..];
        if !r.len().is_multiple_of(8) {
            return Err(Error::Format(
                "value block is not a whole number of f64".into(),
            ));
        }
        let values = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let params = ParameterSet::new(values, header.layout)?;
        if !params.matches(&header.spec) {
            return Err(Error::Format(
                "layout does not match the stored network spec".into(),
            ));
        }
        Ok(Self {
            spec: header.spec,
            params,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// SHA-256 of the parameter values, hex encoded.
pub fn params_digest(params: &ParameterSet) -> String {
    let mut hasher = Sha256::new();
    for v in params.values() {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_save_is_byte_identical() {
        let spec = NetworkSpec::default();
        let params = spec.init(&mut ChaCha8Rng::seed_from_u64(11));
        let ckpt = Checkpoint::new(spec, params).with_meta("seed", 11);
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_wrong_version() {
        let spec = NetworkSpec::default();
        let mut bytes = Checkpoint::new(spec.clone(), ParameterSet::zeros(&spec))
            .to_bytes()
            .unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }
}
