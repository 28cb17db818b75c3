//! Binary checkpoint: magic, version, JSON header, little-endian f32 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MICCCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in bytes.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// `pretrain` or `train`.
    pub stage: String,
    /// Epoch the stored weights come from (1-based; 0 for untrained).
    pub epoch: usize,
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub manifest: Vec<ManifestEntry>,
    /// Hex SHA-256 of the payload bytes.
    pub checksum: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<f32>,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, config: &RunConfig, vocab: Vec<String>, stage: &str, epoch: usize) -> Self {
        let mut manifest = Vec::with_capacity(store.len());
        let mut values = Vec::with_capacity(store.num_scalars());
        for (_, p) in store.iter() {
            manifest.push(ManifestEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), offset: values.len() * 4 });
            values.extend(p.tensor.data().iter().map(|&v| v as f32));
        }
        let header = CheckpointHeader {
            version: VERSION,
            stage: stage.to_string(),
            epoch,
            config: config.clone(),
            vocab,
            manifest,
            checksum: hex_digest(&payload_bytes(&values)),
        };
        Self { header, values }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let payload = payload_bytes(&self.values);
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &body[hlen..];
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of floats"));
        }
        if hex_digest(payload) != header.checksum {
            return Err(bad("payload checksum mismatch"));
        }
        let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        for e in &header.manifest {
            let n: usize = e.shape.iter().product();
            if e.offset % 4 != 0 || e.offset / 4 + n > values.len() {
                return Err(Error::Checkpoint(format!("entry {} lies outside the payload", e.name)));
            }
        }
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let e = self.header.manifest.iter().find(|e| e.name == name)?;
        let n: usize = e.shape.iter().product();
        let data = self.values[e.offset / 4..e.offset / 4 + n].iter().map(|&v| v as f64).collect();
        Tensor::new(e.shape.clone(), data).ok()
    }

    /// Copies stored values into every parameter of `store` whose name satisfies `select`.
    /// Each selected parameter must be present with the same shape; all disagreements are
    /// reported together. Unselected parameters keep their values.
    pub fn restore_into(&self, store: &mut ParamStore, select: impl Fn(&str) -> bool) -> Result<usize> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        let mut updates = Vec::new();
        for (id, p) in store.iter().filter(|(_, p)| select(&p.name)) {
            match self.header.manifest.iter().find(|e| e.name == p.name) {
                None => missing.push(p.name.clone()),
                Some(e) if e.shape != p.tensor.shape() => {
                    mismatched.push(format!("{} (checkpoint {:?}, model {:?})", p.name, e.shape, p.tensor.shape()))
                }
                Some(e) => updates.push((id, e.offset / 4, p.tensor.numel())),
            }
        }
        if !missing.is_empty() || !mismatched.is_empty() {
            let mut msg = String::from("incompatible checkpoint");
            if !mismatched.is_empty() {
                msg += &format!("; shape mismatch: {}", mismatched.join(", "));
            }
            if !missing.is_empty() {
                msg += &format!("; missing: {}", missing.join(", "));
            }
            return Err(Error::Checkpoint(msg));
        }
        for &(id, start, n) in &updates {
            let dst = store.get_mut(id).tensor.data_mut();
            for (d, &s) in dst.iter_mut().zip(&self.values[start..start + n]) {
                *d = s as f64;
            }
        }
        Ok(updates.len())
    }
}

fn payload_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(1);
        s.add_uniform("a.w", &[3, 2], 1.0, &mut rng).unwrap();
        s.add_uniform("b.w", &[4], 1.0, &mut rng).unwrap();
        s
    }

    #[test]
    fn round_trip_within_f32() {
        let s = store();
        let ck = Checkpoint::capture(&s, &RunConfig::default(), vec!["<pad>".into()], "train", 3);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.header, ck.header);
        let mut t = store();
        for id in t.ids().collect::<Vec<_>>() {
            t.get_mut(id).tensor.data_mut().fill(0.0);
        }
        assert_eq!(back.restore_into(&mut t, |_| true).unwrap(), 2);
        for ((_, a), (_, b)) in s.iter().zip(t.iter()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert!((x - y).abs() <= 1e-7 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn corruption_and_mismatch_are_detected() {
        let s = store();
        let ck = Checkpoint::capture(&s, &RunConfig::default(), vec![], "pretrain", 0);
        let mut bytes = ck.to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        assert!(Checkpoint::from_bytes(b"garbage").is_err());

        let mut other = ParamStore::new();
        other.add_zeros("a.w", &[2, 3]).unwrap();
        other.add_zeros("c.w", &[1]).unwrap();
        let err = ck.restore_into(&mut other, |_| true).unwrap_err().to_string();
        assert!(err.contains("shape mismatch: a.w") && err.contains("missing: c.w"), "{err}");
        // unselected parameters are neither checked nor touched
        assert_eq!(ck.restore_into(&mut other, |n| n.starts_with('z')).unwrap(), 0);
    }
}
