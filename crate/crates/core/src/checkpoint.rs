//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, JSON-encoded model config, named
//! tensors (name, shape, little-endian f64 payload), and a trailing
//! SHA-256 over everything before it. Loading verifies the checksum
//! and validates every tensor shape against the stored config.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"BDSUMCK\0";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Serializes config and parameters to the container format.
pub fn encode(config: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    params.validate(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config_json =
        serde_json::to_vec(config).map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    put_bytes(&mut out, &config_json);
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        put_bytes(&mut out, name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let len = self.u64()? as usize;
        self.take(len)
    }
}

/// Parses and validates a container produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(Error::Checkpoint("file too short to be a checkpoint".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::Checkpoint("checksum mismatch: file corrupted".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let config: ModelConfig = serde_json::from_slice(r.bytes_field()?)
        .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
    config.validate()?;
    let count = r.u64()? as usize;
    let mut params = ModelParams::zeros(&config);
    let expected = params.tensors();
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} tensors, expected {}",
            expected.len()
        )));
    }
    drop(expected);
    for (slot, (expected_name, tensor)) in params.tensors_mut().into_iter().enumerate() {
        let name = String::from_utf8_lossy(r.bytes_field()?).into_owned();
        if name != expected_name {
            return Err(Error::Checkpoint(format!(
                "tensor {slot} is named {name:?}, expected {expected_name:?}"
            )));
        }
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, config requires {:?}",
                tensor.shape()
            )));
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8)?;
        for (dst, chunk) in tensor.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        tensor.check_finite(expected_name)?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((config, params))
}

pub fn save(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode(config, params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (ModelConfig, ModelParams) {
        let config = ModelConfig::toy(9, 4, 3);
        let params = ModelParams::init(&config, 42);
        (config, params)
    }

    #[test]
    fn round_trip_is_exact() {
        let (config, params) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &config, &params).unwrap();
        let (loaded_config, loaded_params) = load(&path).unwrap();
        assert_eq!(loaded_config, config);
        assert_eq!(loaded_params, params);
    }

    #[test]
    fn encoding_is_deterministic() {
        let (config, params) = toy();
        assert_eq!(encode(&config, &params).unwrap(), encode(&config, &params).unwrap());
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let (config, params) = toy();
        let mut bytes = encode(&config, &params).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (config, params) = toy();
        let bytes = encode(&config, &params).unwrap();
        assert!(decode(&bytes[..bytes.len() - 40]).is_err());
        assert!(decode(&bytes[..10]).is_err());
    }

    #[test]
    fn not_a_checkpoint_is_rejected() {
        let mut bytes = vec![0u8; 100];
        let digest = Sha256::digest(&bytes[..68]);
        bytes[68..].copy_from_slice(&digest);
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn shape_mismatch_against_config_fails_loudly() {
        let (config, params) = toy();
        let bytes = encode(&config, &params).unwrap();
        // Rewrite the stored config to a larger hidden size and re-sign;
        // the tensor shapes no longer match it.
        let mut bigger = config.clone();
        bigger.hidden_dim += 1;
        bigger.attention_dim += 2;
        let old_json = serde_json::to_vec(&config).unwrap();
        let new_json = serde_json::to_vec(&bigger).unwrap();
        let mut body = bytes[..bytes.len() - CHECKSUM_LEN].to_vec();
        let head = MAGIC.len() + 4;
        body.splice(
            head..head + 8 + old_json.len(),
            (new_json.len() as u64)
                .to_le_bytes()
                .into_iter()
                .chain(new_json.iter().copied()),
        );
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        let err = decode(&body).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
