//! Self-describing binary container for model parameters.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (model config, dtype, tensor names and shapes in storage order),
//! then every tensor's values as little-endian `f64`, row-major. Values are
//! stored bit-exactly, so a round trip reproduces the state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CTXCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: BackboneConfig,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(state: &ModelState) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: state.config().clone(),
        dtype: "f64-le".into(),
        tensors: state
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + 8 * state.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in state.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<ModelState> {
    let bytes = &mut bytes;
    if take(bytes, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, "header length")?.try_into().unwrap());
    let header_len = usize::try_from(header_len).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(take(bytes, header_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let mut parts = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n = entry
            .rows
            .checked_mul(entry.cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} is too large", entry.name)))?;
        let data = take(bytes, n, &entry.name)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        parts.push((entry.name.clone(), Tensor::from_vec(entry.rows, entry.cols, data)));
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
    }
    ModelState::from_parts(header.config, parts).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(path: &Path, state: &ModelState) -> Result<()> {
    fs::write(path, to_bytes(state)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelState {
        ModelState::init(&BackboneConfig {
            hidden_size: 8,
            n_heads: 2,
            max_seq_len: 32,
            seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut state = small();
        state.params_mut()[0].data_mut()[3] = f64::MIN_POSITIVE / 3.0;
        state.params_mut()[1].data_mut()[0] = -0.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &state).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config(), state.config());
        assert_eq!(back.names(), state.names());
        for (a, b) in back.params().iter().zip(state.params()) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.fingerprint(), state.fingerprint());
        assert_eq!(to_bytes(&back).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&small()).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Checkpoint(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(from_bytes(&magic), Err(Error::Checkpoint(_))));
        let mut version = bytes;
        version[8] = 7;
        assert!(matches!(from_bytes(&version), Err(Error::Checkpoint(_))));
        assert!(matches!(load(Path::new("/nonexistent/x.ckpt")), Err(Error::Io { .. })));
    }
}
