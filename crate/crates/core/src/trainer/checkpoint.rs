//! Parameter checkpoint: `"CQSP"`, version `u32`, config echo
//! (`n_q, c_o, c_f, c_r, heads` as `u32`), paradigm byte, tensor count `u32`,
//! then per tensor a `u32`-prefixed UTF-8 name, a `u64` length and
//! little-endian `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::paradigms::ParadigmKind;
use crate::qaa_agg::{QaaConfig, QaaParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CQSP";
const VERSION: u32 = 1;

fn paradigm_byte(p: ParadigmKind) -> u8 {
    match p {
        ParadigmKind::Cs => 0,
        ParadigmKind::Softmax => 1,
        ParadigmKind::Ot => 2,
    }
}

pub fn encode_checkpoint(params: &QaaParams, paradigm: ParadigmKind) -> Vec<u8> {
    let c = params.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.n_q, c.c_o, c.c_f, c.c_r, c.heads] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(paradigm_byte(paradigm));
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(QaaParams, ParadigmKind)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = QaaConfig::new(dims[0], dims[1], dims[2], dims[3]).with_heads(dims[4]);
    config.validate()?;
    let paradigm = match r.take(1)?[0] {
        0 => ParadigmKind::Cs,
        1 => ParadigmKind::Softmax,
        2 => ParadigmKind::Ot,
        b => return Err(Error::Format(format!("unknown paradigm byte {b}"))),
    };
    let mut params = QaaParams::zeros(config);
    let count = r.u32()? as usize;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(Error::Format(format!("checkpoint has {count} tensors, config implies {}", slots.len())));
    }
    for (name, slot) in slots.iter_mut() {
        let len = r.u32()? as usize;
        let got = String::from_utf8_lossy(r.take(len)?).into_owned();
        let n = r.u64()? as usize;
        if got != *name || n != slot.len() {
            return Err(Error::Format(format!(
                "checkpoint tensor {got}[{n}] where {name}[{}] was expected",
                slot.len()
            )));
        }
        for (v, c) in slot.iter_mut().zip(r.take(n * 8)?.chunks_exact(8)) {
            *v = f64::from_le_bytes(c.try_into().unwrap());
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint body".into()));
    }
    params.validate()?;
    Ok((params, paradigm))
}

pub fn save_checkpoint(path: &Path, params: &QaaParams, paradigm: ParadigmKind) -> Result<()> {
    fs::write(path, encode_checkpoint(params, paradigm))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(QaaParams, ParadigmKind)> {
    decode_checkpoint(&fs::read(path)?)
}
