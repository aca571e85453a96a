//! On-disk exchange formats for retrieval artifacts. Embeddings are
//! stored as 32-bit floats ("3JEM"), hash codes as packed 64-bit words
//! ("3JHC"); both carry aligned labels and length-prefixed UTF-8 ids.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

use super::itq::HashCodes;
use super::{EmbeddingSet, Role};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"3JEM";
pub const HASH_MAGIC: [u8; 4] = *b"3JHC";
pub const VERSION: u16 = 1;

fn take<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn read_ids(r: &mut impl Read, path: &Path, count: usize) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(take(r, path)?) as usize;
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        ids.push(
            String::from_utf8(bytes)
                .map_err(|_| Error::Validation("dump id is not valid UTF-8".into()))?,
        );
    }
    Ok(ids)
}

fn write_ids(w: &mut impl Write, path: &Path, ids: &[String]) -> Result<()> {
    for id in ids {
        let bytes = id.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())
            .and_then(|_| w.write_all(bytes))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn check_header(path: &Path, magic: [u8; 4], expect: [u8; 4], version: u16) -> Result<()> {
    if magic != expect {
        return Err(Error::Validation(format!(
            "{} is not a {} dump",
            path.display(),
            String::from_utf8_lossy(&expect)
        )));
    }
    if version != VERSION {
        return Err(Error::Validation(format!(
            "dump version {version} unsupported (expected {VERSION})"
        )));
    }
    Ok(())
}

/// Vectors are narrowed to f32 on disk; callers comparing dumps should
/// compare files, not the reloaded f64 widening.
pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let tmp = path.with_extension("em.tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&tmp, e);
        w.write_all(&EMBEDDING_MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(set.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(set.dim() as u32).to_le_bytes()).map_err(io)?;
        for v in set.vectors.iter() {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
        for &label in &set.labels {
            w.write_all(&(label as u32).to_le_bytes()).map_err(io)?;
        }
        write_ids(&mut w, &tmp, &set.ids)?;
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path, role: Role) -> Result<EmbeddingSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic: [u8; 4] = take(&mut r, path)?;
    let version = u16::from_le_bytes(take(&mut r, path)?);
    check_header(path, magic, EMBEDDING_MAGIC, version)?;
    let count = u32::from_le_bytes(take(&mut r, path)?) as usize;
    let dim = u32::from_le_bytes(take(&mut r, path)?) as usize;
    let mut vectors = Array2::zeros((count, dim));
    for i in 0..count {
        for j in 0..dim {
            vectors[(i, j)] = f32::from_le_bytes(take(&mut r, path)?) as f64;
        }
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(u32::from_le_bytes(take(&mut r, path)?) as usize);
    }
    let ids = read_ids(&mut r, path, count)?;
    EmbeddingSet::new(ids, labels, vectors, role)
}

pub fn write_hash_codes(path: &Path, codes: &HashCodes) -> Result<()> {
    let tmp = path.with_extension("hc.tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&tmp, e);
        w.write_all(&HASH_MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(codes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(codes.bits() as u32).to_le_bytes()).map_err(io)?;
        for word in codes.words() {
            w.write_all(&word.to_le_bytes()).map_err(io)?;
        }
        for &label in &codes.labels {
            w.write_all(&(label as u32).to_le_bytes()).map_err(io)?;
        }
        write_ids(&mut w, &tmp, &codes.ids)?;
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_hash_codes(path: &Path) -> Result<HashCodes> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic: [u8; 4] = take(&mut r, path)?;
    let version = u16::from_le_bytes(take(&mut r, path)?);
    check_header(path, magic, HASH_MAGIC, version)?;
    let count = u32::from_le_bytes(take(&mut r, path)?) as usize;
    let bits = u32::from_le_bytes(take(&mut r, path)?) as usize;
    let words_per_row = bits.div_ceil(64);
    let mut words = Vec::with_capacity(count * words_per_row);
    for _ in 0..count * words_per_row {
        words.push(u64::from_le_bytes(take(&mut r, path)?));
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(u32::from_le_bytes(take(&mut r, path)?) as usize);
    }
    let ids = read_ids(&mut r, path, count)?;
    HashCodes::from_parts(bits, words, ids, labels)
}
