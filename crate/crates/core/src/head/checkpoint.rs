//! `AHP1` checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "AHP1" | version: u32 = 1 | text: u32 | image: u32 | hidden: u32
//! then 11 blocks, each `len: u32` followed by `len` f64 values:
//! attn_is.{w1,b1,w2,b2}, attn_em.{w1,b1,w2,b2}, proj.{w,b}, gamma
//! ```
//!
//! Matrices are row-major with one row per output unit.

use std::fs;
use std::path::Path;

use super::{HeadDims, HeadParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AHP1";
const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &HeadParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * params.len() + 4 * 11);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [params.dims.text, params.dims.image, params.dims.hidden] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let gamma = [params.gamma];
    for block in params.blocks().into_iter().chain([&gamma[..]]) {
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TruncatedFile {
                path: self.path.to_path_buf(),
                detail: format!(
                    "need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Decodes a checkpoint; `path` is only used in error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<HeadParams> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "AHP1",
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let dims = HeadDims::new(
        cur.u32()? as usize,
        cur.u32()? as usize,
        cur.u32()? as usize,
    );
    let expected: Vec<usize> = HeadParams::block_lens(dims)
        .into_iter()
        .chain([1])
        .collect();
    let mut flat = Vec::with_capacity(expected.iter().sum());
    for (i, want) in expected.into_iter().enumerate() {
        let len = cur.u32()? as usize;
        if len != want {
            return Err(Error::shape(format!(
                "checkpoint block {i} has {len} values, dims imply {want}"
            )));
        }
        for chunk in cur.take(8 * len)?.chunks_exact(8) {
            flat.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::shape(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - cur.pos
        )));
    }
    let params = HeadParams::from_flat(dims, &flat)?;
    if !(params.gamma > 0.0) {
        return Err(Error::NonFinite(format!(
            "temperature {} is not positive",
            params.gamma
        )));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &HeadParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<HeadParams> {
    decode_checkpoint(&fs::read(path)?, path)
}
