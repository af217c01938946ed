//! Binary checkpoint format.
//!
//! ```text
//! "LOCF" | version: u8 | config_len: u32 | config JSON
//!        | manifest_len: u32 | manifest JSON | count: u64 | count × f32 (LE)
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"LOCF";
pub const VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn encode(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(params.config())?;
    let manifest: Vec<ManifestEntry> = params
        .layout()
        .entries
        .iter()
        .map(|e| ManifestEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset: e.offset,
        })
        .collect();
    let manifest = serde_json::to_vec(&manifest)?;
    let data = params.data();
    let mut out = Vec::with_capacity(4 + 1 + 8 + config.len() + manifest.len() + 8 + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated while reading {what}"))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let n = r.u32("config length")?;
    let config: ModelConfig = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
    let n = r.u32("manifest length")?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(r.take(n, "manifest")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
    let count = u64::from_le_bytes(r.take(8, "payload length")?.try_into().unwrap()) as usize;
    let payload = r.take(count.saturating_mul(4), "payload")?;
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let manifest_total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if manifest_total != count {
        return Err(Error::CorruptCheckpoint(format!(
            "manifest describes {manifest_total} values, payload holds {count}"
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ModelParams::from_data(&config, data)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let layout_matches = params.layout().entries.len() == manifest.len()
        && params
            .layout()
            .entries
            .iter()
            .zip(&manifest)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.offset == b.offset);
    if !layout_matches {
        return Err(Error::CorruptCheckpoint("manifest does not match config layout".into()));
    }
    Ok(params)
}

/// Writes atomically via a temporary sibling file.
pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(params)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Hex SHA-256 of a checkpoint's bytes.
pub fn checkpoint_hash(params: &ModelParams<f32>) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(encode(params)?)))
}
