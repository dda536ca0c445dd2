//! Binary checkpoint of [`ModelParams`].
//!
//! Little-endian, same conventions as the embedding container:
//!
//! ```text
//! "MSAMCKP1"                          8 bytes
//! version u32 = 1, D u32, k u32, S u32
//! S × { name_len u32, name (ASCII), ndim u32, ndim × u32 dims, f32 data }
//! CRC-32 (IEEE) of every preceding byte, u32
//! ```
//!
//! Sections appear in [`ModelParams::flatten`] order followed by the two
//! σ floors as scalars.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ModelParams;
use crate::ciffp::CiffpParams;
use crate::embio::container::{verify_crc, Cursor};
use crate::error::{Error, Result};
use crate::losses::LogitScale;
use crate::msalm::MsalmParams;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"MSAMCKP1";
pub const CKPT_VERSION: u32 = 1;

const FLOOR_SECTIONS: [&str; 2] = ["msalm_text.sigma_floor", "msalm_video.sigma_floor"];

fn sections(params: &ModelParams) -> Vec<(String, Tensor<f32>)> {
    let mut out = params.flatten();
    out.push((FLOOR_SECTIONS[0].into(), Tensor::scalar(params.msalm_text.sigma_floor)));
    out.push((FLOOR_SECTIONS[1].into(), Tensor::scalar(params.msalm_video.sigma_floor)));
    out
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    params.check()?;
    let secs = sections(params);
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    for v in [CKPT_VERSION, u32_of(params.dim())?, u32_of(params.k())?, u32_of(secs.len())?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (name, t) in &secs {
        out.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank())?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Writes `params` and returns the byte count.
pub fn write_checkpoint<W: Write>(params: &ModelParams, mut dest: W) -> Result<usize> {
    let bytes = encode_checkpoint(params)?;
    dest.write_all(&bytes)?;
    dest.flush()?;
    Ok(bytes.len())
}

pub fn write_checkpoint_file(params: &ModelParams, path: impl AsRef<Path>) -> Result<usize> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn read_checkpoint_file(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() < CKPT_MAGIC.len() || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let payload = verify_crc(&bytes)?;
    let mut cur = Cursor::new(&payload[CKPT_MAGIC.len()..]);
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dim = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    if dim == 0 || k == 0 {
        return Err(Error::Format(format!("invalid header: D = {dim}, k = {k}")));
    }

    let mut named = BTreeMap::new();
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("section name is not ASCII".into()))?
            .to_string();
        let ndim = cur.u32()? as usize;
        if ndim > 2 {
            return Err(Error::Format(format!("section {name} has rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        let t = cur.floats(&dims)?;
        if named.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate section {name}")));
        }
    }
    if cur.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", cur.remaining())));
    }

    let skeleton = MsalmParams::<f32>::with_queries(Tensor::zeros([k, dim]))?;
    let mut params = ModelParams {
        ciffp: CiffpParams::zeros(dim),
        msalm_text: skeleton.clone(),
        msalm_video: skeleton,
        scale: LogitScale::default(),
    };
    params.assign(&named)?;
    let floor = |name: &str| -> Result<f32> {
        named
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing section {name}")))?
            .item()
    };
    params.msalm_text.sigma_floor = floor(FLOOR_SECTIONS[0])?;
    params.msalm_video.sigma_floor = floor(FLOOR_SECTIONS[1])?;
    if named.len() != super::NUM_TENSORS + FLOOR_SECTIONS.len() {
        return Err(Error::Format(format!("{} unexpected sections", named.len() - super::NUM_TENSORS - 2)));
    }
    params.check()?;
    Ok(params)
}
