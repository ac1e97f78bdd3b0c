//! Checkpoint file format (little-endian binary):
//!
//! ```text
//! magic    b"HGRC"
//! version  u32 (currently 1)
//! d        u32
//! n_users  u64
//! n_items  u64
//! config   u64 length + JSON bytes (ModelConfig)
//! vocab    u64 length + JSON bytes (PromptVocab)
//! n_blocks u64
//! blocks   per block: u64 name length + name bytes,
//!          u64 rows, u64 cols, rows*cols f32 values (row-major)
//! digest   32-byte SHA-256 over everything above
//! ```
//!
//! Values are stored as f32; save -> load -> save is byte-identical.
//! Writes are atomic (temp file + rename).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::PromptVocab;
use crate::params::ModelParams;
use crate::pipeline::Model;

pub const MAGIC: &[u8; 4] = b"HGRC";
pub const VERSION: u32 = 1;

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

/// Serialize a model to checkpoint bytes.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.config.d as u32).to_le_bytes());
    buf.extend_from_slice(&(model.n_users as u64).to_le_bytes());
    buf.extend_from_slice(&(model.n_items as u64).to_le_bytes());
    put_bytes(
        &mut buf,
        &serde_json::to_vec(&model.config).expect("config serializes"),
    );
    put_bytes(
        &mut buf,
        &serde_json::to_vec(&model.vocab).expect("vocab serializes"),
    );
    buf.extend_from_slice(&(model.params.n_blocks() as u64).to_le_bytes());
    for (name, value) in model.params.blocks() {
        put_bytes(&mut buf, name.as_bytes());
        buf.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
        for &x in value.iter() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn var_bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

/// Parse checkpoint bytes back into a model.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 32 + 4 {
        return Err(Error::CorruptCheckpoint("file too short".into()));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::CorruptCheckpoint("digest mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            got: version,
            supported: VERSION,
        });
    }
    let d = r.u32()? as usize;
    let n_users = r.u64()? as usize;
    let n_items = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.var_bytes()?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config block: {e}")))?;
    if config.d != d {
        return Err(Error::DimensionMismatch {
            file_d: d,
            config_d: config.d,
        });
    }
    let vocab: PromptVocab = serde_json::from_slice(r.var_bytes()?)
        .map_err(|e| Error::CorruptCheckpoint(format!("vocab block: {e}")))?;
    let n_blocks = r.u64()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name = String::from_utf8(r.var_bytes()?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("non-UTF-8 block name".into()))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let value = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::CorruptCheckpoint(format!("block {name}: {e}")))?;
        blocks.push((name, value));
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(Model {
        config,
        params: ModelParams::from_blocks(blocks),
        vocab,
        n_users,
        n_items,
    })
}

/// Atomic save: write to a sibling temp file, then rename into place.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
