//! `BBLV` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BBLV" | version u32 | D u32 | H u32 | L u32 | obs tag u8
//! per tensor (encoder then decoder, weight before bias):
//!     rank u32 | dims u32 × rank | f32 × Π dims
//! checksum u64   (first 8 bytes of SHA-256 over the tensor section)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Architecture, ObsModel, VaeModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BBLV";
pub const CHECKPOINT_VERSION: u32 = 1;

fn tensor_section(model: &VaeModel) -> Vec<u8> {
    let mut out = Vec::new();
    for p in model.params() {
        let t = &p.value;
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

fn checksum_of(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub(crate) fn payload_checksum(model: &VaeModel) -> u64 {
    checksum_of(&tensor_section(model))
}

/// Serializes a model to checkpoint bytes.
pub fn write_checkpoint(model: &VaeModel) -> Vec<u8> {
    let a = model.arch;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((a.data_dim as u32).to_le_bytes());
    out.extend((a.hidden as u32).to_le_bytes());
    out.extend((a.latent as u32).to_le_bytes());
    out.push(a.obs.tag());
    let section = tensor_section(model);
    let sum = checksum_of(&section);
    out.extend(section);
    out.extend(sum.to_le_bytes());
    out
}

pub fn save_checkpoint(model: &VaeModel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&write_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VaeModel> {
    read_checkpoint(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(
                self.pos as u64,
                format!("truncated checkpoint reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parses checkpoint bytes, verifying magic, version, shapes and checksum.
pub fn read_checkpoint(bytes: &[u8]) -> Result<VaeModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, "bad checkpoint magic"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let data_dim = r.u32("data_dim")? as usize;
    let hidden = r.u32("hidden")? as usize;
    let latent = r.u32("latent")? as usize;
    let tag_pos = r.pos;
    let tag = r.take(1, "obs tag")?[0];
    let obs = ObsModel::from_tag(tag)
        .ok_or_else(|| Error::parse(tag_pos as u64, format!("unknown obs tag {tag}")))?;
    let arch = Architecture::new(data_dim, hidden, latent, obs);
    if data_dim == 0 || hidden == 0 || latent == 0 {
        return Err(Error::parse(8, "zero-sized architecture"));
    }

    // A freshly built model supplies the expected shapes and names.
    let mut model = VaeModel::new(arch, 0);
    let section_start = r.pos;
    for p in model
        .encoder
        .params_mut()
        .into_iter()
        .chain(model.decoder.params_mut())
    {
        let at = r.pos as u64;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        if dims != p.value.shape() {
            return Err(Error::parse(
                at,
                format!(
                    "tensor {} has shape {dims:?}, expected {:?}",
                    p.name,
                    p.value.shape()
                ),
            ));
        }
        let payload = r.take(4 * p.value.len(), "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        p.value = Tensor::new(dims, data)?;
    }
    let section = &bytes[section_start..r.pos];
    let sum_at = r.pos as u64;
    let stored = u64::from_le_bytes(r.take(8, "checksum")?.try_into().expect("8 bytes"));
    if stored != checksum_of(section) {
        return Err(Error::parse(sum_at, "checkpoint checksum mismatch"));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(
            r.pos as u64,
            "trailing bytes after checkpoint",
        ));
    }
    Ok(model)
}
