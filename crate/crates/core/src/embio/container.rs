//! Binary container for [`EmbeddingBatch`].
//!
//! Little-endian throughout:
//!
//! ```text
//! "MSAMEMB1"                         8 bytes
//! version u32 = 1, D u32, V u32, T u32
//! V × { id u64, F u32, F·D f32 frames, D f32 pooled }
//! T × { id u64, video_id u64, L u32, L·D f32 tokens, D f32 pooled }
//! CRC-32 (IEEE) of every preceding byte, u32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{diagnostics_to_error, validate, EmbeddingBatch, TextRecord, VideoRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MSAMEMB1";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 * 4;

/// Serializes `batch` and returns the number of bytes written.
///
/// The batch is validated first; nothing is written when it is invalid.
pub fn write_container<W: Write>(batch: &EmbeddingBatch, mut dest: W) -> Result<usize> {
    if let Some(e) = diagnostics_to_error(&validate(batch)) {
        return Err(e);
    }
    let bytes = encode(batch)?;
    dest.write_all(&bytes)?;
    dest.flush()?;
    Ok(bytes.len())
}

pub fn write_file(batch: &EmbeddingBatch, path: impl AsRef<Path>) -> Result<usize> {
    let f = File::create(path)?;
    write_container(batch, BufWriter::new(f))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<EmbeddingBatch> {
    let f = File::open(path)?;
    read_container(BufReader::new(f))
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

fn put_floats(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(batch: &EmbeddingBatch) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(batch.dim, "dimension")?.to_le_bytes());
    out.extend_from_slice(&to_u32(batch.videos.len(), "video count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(batch.texts.len(), "text count")?.to_le_bytes());
    for v in &batch.videos {
        out.extend_from_slice(&v.id.to_le_bytes());
        out.extend_from_slice(&to_u32(v.frames.dim(0), "frame count")?.to_le_bytes());
        put_floats(&mut out, &v.frames);
        put_floats(&mut out, &v.pooled);
    }
    for t in &batch.texts {
        out.extend_from_slice(&t.id.to_le_bytes());
        out.extend_from_slice(&t.video_id.to_le_bytes());
        out.extend_from_slice(&to_u32(t.tokens.dim(0), "token count")?.to_le_bytes());
        put_floats(&mut out, &t.tokens);
        put_floats(&mut out, &t.pooled);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Corruption(format!(
                "need {n} bytes at offset {}, only {} remain",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads `rows × cols` floats, refusing counts larger than the remaining input.
    pub(crate) fn floats(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
        let (n, bytes) = n.ok_or_else(|| Error::Corruption(format!("record size overflows: {shape:?}")))?;
        let raw = self.take(bytes)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        debug_assert_eq!(data.len(), n);
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Verifies the trailing CRC-32 and returns the covered payload.
pub(crate) fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Corruption("input too short for a checksum".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Corruption(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    Ok(payload)
}

/// Parses and validates a container. The checksum is verified before any
/// record is decoded.
pub fn read_container<R: Read>(mut source: R) -> Result<EmbeddingBatch> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let batch = decode(&bytes)?;
    if let Some(e) = diagnostics_to_error(&validate(&batch)) {
        return Err(e);
    }
    Ok(batch)
}

/// Parses a container without the semantic checks of [`validate`].
pub fn decode(bytes: &[u8]) -> Result<EmbeddingBatch> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
            return Err(Error::Corruption("truncated before end of magic".into()));
        }
        return Err(Error::Format("bad magic".into()));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Corruption(format!("truncated: {} bytes", bytes.len())));
    }
    let payload = verify_crc(bytes)?;
    let mut cur = Cursor::new(&payload[MAGIC.len()..]);
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = cur.u32()? as usize;
    let n_videos = cur.u32()? as usize;
    let n_texts = cur.u32()? as usize;
    if dim == 0 {
        return Err(Error::Format("dimension is zero".into()));
    }

    // each video needs at least 12 header bytes, each text 20; bound the
    // allocations by what the input can actually hold
    if n_videos.saturating_mul(12) > cur.remaining() || n_texts.saturating_mul(20) > cur.remaining() {
        return Err(Error::Corruption("record counts exceed input size".into()));
    }
    let mut videos = Vec::with_capacity(n_videos);
    for _ in 0..n_videos {
        let id = cur.u64()?;
        let f = cur.u32()? as usize;
        if f == 0 {
            return Err(Error::Validation(format!("video {id} has zero frames")));
        }
        let frames = cur.floats(&[f, dim])?;
        let pooled = cur.floats(&[dim])?;
        videos.push(VideoRecord { id, frames, pooled });
    }
    let mut texts = Vec::with_capacity(n_texts);
    for _ in 0..n_texts {
        let id = cur.u64()?;
        let video_id = cur.u64()?;
        let l = cur.u32()? as usize;
        if l == 0 {
            return Err(Error::Validation(format!("text {id} has zero tokens")));
        }
        let tokens = cur.floats(&[l, dim])?;
        let pooled = cur.floats(&[dim])?;
        texts.push(TextRecord {
            id,
            video_id,
            tokens,
            pooled,
        });
    }
    if cur.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last record",
            cur.remaining()
        )));
    }
    Ok(EmbeddingBatch { dim, videos, texts })
}
