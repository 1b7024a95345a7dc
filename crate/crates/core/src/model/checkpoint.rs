//! Binary checkpoint container.
//!
//! ```text
//! magic "IUPACINF" | u32 version | u64 header length | JSON header | f64 LE blobs
//! ```
//!
//! The header names every tensor with its shape, in blob order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Layout, ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::property::PropertySpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IUPACINF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct TensorInfo {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Header {
    config: ModelConfig,
    step: u64,
    vocab_version: String,
    property: PropertySpec,
    tensors: Vec<TensorInfo>,
}

impl ModelState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config,
            step: self.step,
            vocab_version: self.vocab_version.clone(),
            property: self.property,
            tensors: self
                .layout
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, p)| TensorInfo {
                    name: name.clone(),
                    shape: [p.nrows(), p.ncols()],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for x in p.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        header.config.validate()?;
        let layout = Layout::new(&header.config);
        if header.tensors.len() != layout.names.len() {
            return Err(bad("tensor list does not match the configuration"));
        }
        for (info, (name, shape)) in header.tensors.iter().zip(layout.names.iter().zip(&layout.shapes)) {
            if &info.name != name || info.shape != [shape.0, shape.1] {
                return Err(Error::Checkpoint(format!("unexpected tensor {} {:?}", info.name, info.shape)));
            }
        }
        let mut blob = &body[header_len..];
        let mut params = Vec::with_capacity(layout.shapes.len());
        for &(r, c) in &layout.shapes {
            let n = r * c * 8;
            if blob.len() < n {
                return Err(bad("truncated tensor data"));
            }
            let vals: Vec<f64> = blob[..n].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            params.push(Array2::from_shape_vec((r, c), vals).expect("shape matches length"));
            blob = &blob[n..];
        }
        if !blob.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(ModelState {
            config: header.config,
            step: header.step,
            vocab_version: header.vocab_version,
            property: header.property,
            params,
            layout,
        })
    }
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, state.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelState::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::property::PropertyKind;
    use crate::vocab::Vocabulary;

    fn state() -> (Vocabulary, ModelState) {
        let v = Vocabulary::reference();
        let cfg = ModelConfig {
            model_dim: 8,
            ff_dim: 16,
            heads: 2,
            layers: 1,
            ..ModelConfig::small(v.len())
        };
        let mut m = ModelState::new(cfg, &v, PropertySpec::shipped(PropertyKind::LogP)).unwrap();
        m.step = 42;
        (v, m)
    }

    #[test]
    fn bit_exact_round_trip() {
        let (v, m) = state();
        let back = ModelState::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.property, m.property);
        assert_eq!(back.vocab_version, m.vocab_version);
        for (a, b) in m.params.iter().zip(&back.params) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let enc = [v.property_token(crate::PropertyBucket::Low), v.sentinel(1)];
        let pre = [v.pad(), v.sentinel(1)];
        assert_eq!(m.forward(&enc, &pre).unwrap(), back.forward(&enc, &pre).unwrap());
    }

    #[test]
    fn version_and_corruption_errors() {
        let (_, m) = state();
        let mut bytes = m.to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(ModelState::from_bytes(&bytes), Err(Error::CheckpointVersion { found: 7, supported: 1 })));
        let good = m.to_bytes();
        assert!(matches!(ModelState::from_bytes(&good[..good.len() - 3]), Err(Error::Checkpoint(_))));
        assert!(matches!(ModelState::from_bytes(b"not a checkpoint at all"), Err(Error::Checkpoint(_))));
    }
}
