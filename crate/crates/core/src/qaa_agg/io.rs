//! Descriptor file: little-endian `"CQSA"`, version `u32`, `C_d` `u32`,
//! count `u64`, then `count × C_d` `f32` values. Image ids live in a text
//! sidecar (`<path>.ids`), one per line, in the same order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::Descriptor;
use crate::error::{Error, Result};

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"CQSA";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn write_descriptor_file(path: &Path, descriptors: &[Descriptor]) -> Result<()> {
    let dim = descriptors.first().map_or(0, Descriptor::dim);
    if let Some(bad) = descriptors.iter().find(|d| d.dim() != dim) {
        return Err(Error::dim(
            "write_descriptor_file",
            format!("C_d {dim}"),
            format!("{} has {}", bad.image_id, bad.dim()),
        ));
    }
    if let Some(bad) = descriptors.iter().find(|d| d.image_id.contains(['\n', '\r'])) {
        return Err(Error::Argument(format!("image id {:?} contains a line break", bad.image_id)));
    }
    let dim32 = u32::try_from(dim).map_err(|_| Error::Argument(format!("C_d {dim} exceeds u32")))?;

    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(DESCRIPTOR_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&dim32.to_le_bytes())?;
    w.write_all(&(descriptors.len() as u64).to_le_bytes())?;
    for d in descriptors {
        for &v in &d.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;

    let mut ids = String::new();
    for d in descriptors {
        ids.push_str(&d.image_id);
        ids.push('\n');
    }
    fs::write(sidecar_path(path), ids)?;
    Ok(())
}

pub fn read_descriptor_file(path: &Path) -> Result<Vec<Descriptor>> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != DESCRIPTOR_MAGIC {
        return Err(Error::Format(format!("{} is not a descriptor file", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported descriptor file version {version}")));
    }
    let dim = u32_at(8) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + count * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "descriptor file length {} does not match header ({count} × {dim})",
            bytes.len()
        )));
    }

    let ids_text = fs::read_to_string(sidecar_path(path))?;
    let ids: Vec<&str> = ids_text.lines().collect();
    if ids.len() != count {
        return Err(Error::Format(format!("sidecar has {} ids for {count} descriptors", ids.len())));
    }

    let body = &bytes[HEADER_LEN..];
    Ok(ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let values = body[i * dim * 4..(i + 1) * dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Descriptor::new(values, *id)
        })
        .collect())
}
