//! Checkpoint container: magic, a JSON header with the network config and
//! provenance, then every parameter as little-endian f32 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{NetworkConfig, NetworkState, ParamStore, StageTag};

const MAGIC: &[u8; 8] = b"SCCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: NetworkConfig,
    pub stage: StageTag,
    pub seed: u64,
    pub epoch: usize,
    pub parent_hash: Option<String>,
    pub params: Vec<(String, Vec<usize>)>,
}

pub fn checkpoint_bytes(net: &NetworkState) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: net.config().clone(),
        stage: net.stage,
        seed: net.seed,
        epoch: net.epoch,
        parent_hash: net.parent_hash.clone(),
        params: net.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * net.params().num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in net.params().iter() {
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the checkpoint atomically and returns its content hash.
pub fn save_checkpoint(net: &NetworkState, path: &Path) -> Result<String> {
    let bytes = checkpoint_bytes(net)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

/// Loads a checkpoint; when `expected` is given the stored config must match
/// it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<(NetworkState, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let hash = content_hash(&bytes);
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])?;
    if let Some(cfg) = expected {
        if cfg != &header.config {
            return Err(Error::Checkpoint(format!(
                "{}: config mismatch: checkpoint has {:?}, expected {:?}",
                path.display(),
                header.config,
                cfg
            )));
        }
    }
    let mut store = ParamStore::default();
    let mut offset = header_end;
    for (name, shape) in &header.params {
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(bad("truncated parameter data"));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.register(name.clone(), shape.clone(), super::params::Init::Const(0.0), 0);
        store.get_mut(name).expect("just registered").data = data;
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    let net = NetworkState::from_parts(header.config, store, header.stage, header.seed, header.epoch, header.parent_hash)?;
    Ok((net, hash))
}

#[cfg(test)]
mod tests {
    use super::super::build_network;
    use super::*;

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetworkConfig { base_channels: 2, projection_dim: 4, local_head_channels: 2, ..Default::default() };
        let mut net = build_network(&cfg, 11).unwrap();
        net.stage = StageTag::GlobalPretrained;
        net.epoch = 7;
        net.parent_hash = Some("abc".into());
        let path = dir.path().join("a.ckpt");
        let hash = save_checkpoint(&net, &path).unwrap();
        let (back, h2) = load_checkpoint(&path, Some(&cfg)).unwrap();
        assert_eq!(hash, h2);
        assert_eq!(back.params(), net.params());
        assert_eq!((back.stage, back.epoch, back.parent_hash.as_deref()), (StageTag::GlobalPretrained, 7, Some("abc")));
        assert_eq!(checkpoint_bytes(&back).unwrap(), fs::read(&path).unwrap());

        let other = NetworkConfig { base_channels: 4, ..cfg };
        let err = load_checkpoint(&path, Some(&other)).unwrap_err();
        assert!(err.to_string().contains("config mismatch"));

        fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }
}
