//! Feature archive: `S2TFEAT1`, `u32` dimension, then records of
//! (`u32` id length, id bytes, `u32` frame count, frames × dim `f32`) until end of file.

use std::fs;
use std::path::Path;

use s2t_core::audio::FeatureSequence;

use crate::binio::{Reader, Writer};
use crate::error::FormatError;

pub const MAGIC: &[u8; 8] = b"S2TFEAT1";

pub type Record = (String, FeatureSequence);

pub fn is_archive(bytes: &[u8]) -> bool {
    bytes.starts_with(MAGIC)
}

pub fn encode_archive(dim: usize, records: &[Record]) -> Result<Vec<u8>, FormatError> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(dim as u32);
    for (id, seq) in records {
        if seq.dim() != dim {
            return Err(FormatError::Malformed(format!(
                "record `{id}` has dimension {}, archive has {dim}",
                seq.dim()
            )));
        }
        w.string(id);
        w.u32(seq.frame_count() as u32);
        for &v in seq.data() {
            w.f32(v as f32);
        }
    }
    Ok(w.buf)
}

/// Returns the archive dimension and its records in file order.
pub fn decode_archive(bytes: &[u8]) -> Result<(usize, Vec<Record>), FormatError> {
    let mut r = Reader::new(bytes);
    if r.bytes(MAGIC.len(), "feature archive header")? != MAGIC {
        return Err(FormatError::BadMagic { expected: "S2TFEAT1" });
    }
    let dim = r.u32("feature dimension")? as usize;
    if dim == 0 {
        return Err(FormatError::Malformed("feature dimension is zero".into()));
    }
    let mut records = Vec::new();
    while !r.is_empty() {
        let id = r.string("record id")?;
        let frames = r.u32("frame count")? as usize;
        let raw = r.bytes(frames * dim * 4, "feature values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        records.push((id, FeatureSequence::new(dim, data)?));
    }
    Ok((dim, records))
}

pub fn write_archive(path: &Path, dim: usize, records: &[Record]) -> Result<(), FormatError> {
    Ok(fs::write(path, encode_archive(dim, records)?)?)
}

pub fn read_archive(path: &Path) -> Result<(usize, Vec<Record>), FormatError> {
    decode_archive(&fs::read(path)?)
}
