//! Versioned binary parameter container.
//!
//! Layout (little endian): magic `U2DF`, u32 version, u32 kind, u32 config
//! length + JSON config, u32 parameter count, then per parameter a u16 name
//! length + name, u32 rows, u32 cols and f32 data. A CRC32 of everything
//! before it closes the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"U2DF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Denoiser = 1,
    Rank = 2,
}

impl CheckpointKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(CheckpointKind::Denoiser),
            2 => Ok(CheckpointKind::Rank),
            _ => Err(Error::Checkpoint(format!("unknown kind {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub params: BTreeMap<String, Mat>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, config: serde_json::Value, store: &ParamStore) -> Self {
        Checkpoint {
            kind,
            config,
            params: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, m) in &self.params {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for &v in &m.data {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(Error::NonFinite(format!("parameter {name}")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let body = bytes.len().checked_sub(4).ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body]) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: &bytes[..body], pos: 8 };
        let kind = CheckpointKind::from_u32(r.u32()?)?;
        let cfg_len = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(cfg_len)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let nl = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| Error::Checkpoint("bad parameter name".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params.insert(name, Mat { rows, cols, data });
        }
        if r.pos != r.bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { kind, config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    pub fn expect(self, kind: CheckpointKind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(self)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ps = ParamStore::new();
        ps.add("a.w", Mat::from_vec(2, 2, vec![1.0, -0.5, 0.25, 3.0]).unwrap());
        ps.add("b", Mat::filled(1, 3, 0.125));
        Checkpoint::new(CheckpointKind::Rank, serde_json::json!({"width": 4}), &ps)
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let i = bytes.len() / 2;
        bytes[i] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE0000").is_err());
        assert!(sample().expect(CheckpointKind::Denoiser).is_err());
    }
}
