//! Binary checkpoints: `PMX1`, a `u32` little-endian byte length, the
//! config as UTF-8 text, then every parameter as a little-endian `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMX1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = self.config_text.as_bytes();
        let len = u32::try_from(text.len()).map_err(|_| Error::Format("config text exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(8 + text.len() + 8 * self.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(text);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a PMX1 checkpoint".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(8..8 + len)
            .ok_or_else(|| Error::Format("checkpoint config section is truncated".into()))?;
        let config_text = String::from_utf8(body.to_vec())
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let rest = &bytes[8 + len..];
        if !rest.len().is_multiple_of(8) {
            return Err(Error::Format("checkpoint parameter section is not a whole number of f64".into()));
        }
        let values = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { config_text, values })
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
