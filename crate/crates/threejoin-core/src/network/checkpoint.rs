//! Versioned binary checkpoint container: a JSON metadata blob plus
//! named f64 tensors, written little-endian and loaded bit-exactly.
//! Layout: magic "3JCK", version u16, metadata length u32 + bytes,
//! tensor count u32, then per tensor name length u32 + bytes,
//! element count u64, and raw f64 data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"3JCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.tensors.insert(name.into(), data);
    }

    /// Store a model's tensors under `prefix.name` keys.
    pub fn insert_group(&mut self, prefix: &str, names: &[String], tensors: &[&[f64]]) {
        debug_assert_eq!(names.len(), tensors.len());
        for (name, data) in names.iter().zip(tensors) {
            self.tensors.insert(format!("{prefix}.{name}"), data.to_vec());
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&[f64]> {
        self.tensors
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Validation(format!("checkpoint is missing tensor {name:?}")))
    }

    /// Copy a group back into live parameter slices, verifying lengths.
    pub fn restore_group(
        &self,
        prefix: &str,
        names: &[String],
        targets: &mut [&mut [f64]],
    ) -> Result<()> {
        if names.len() != targets.len() {
            return Err(Error::Shape(format!(
                "group {prefix:?} restores {} tensors into {} slots",
                names.len(),
                targets.len()
            )));
        }
        for (name, target) in names.iter().zip(targets.iter_mut()) {
            let key = format!("{prefix}.{name}");
            let stored = self.tensor(&key)?;
            if stored.len() != target.len() {
                return Err(Error::Shape(format!(
                    "tensor {key:?} holds {} values, model expects {}",
                    stored.len(),
                    target.len()
                )));
            }
            target.copy_from_slice(stored);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ck.tmp");
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            let io = |e| Error::io(&tmp, e);
            w.write_all(&MAGIC).map_err(io)?;
            w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
            let meta = serde_json::to_vec(&self.metadata)
                .map_err(|e| Error::Validation(format!("unserializable metadata: {e}")))?;
            w.write_all(&(meta.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&meta).map_err(io)?;
            w.write_all(&(self.tensors.len() as u32).to_le_bytes())
                .map_err(io)?;
            for (name, data) in &self.tensors {
                let nb = name.as_bytes();
                w.write_all(&(nb.len() as u32).to_le_bytes()).map_err(io)?;
                w.write_all(nb).map_err(io)?;
                w.write_all(&(data.len() as u64).to_le_bytes()).map_err(io)?;
                for v in data {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        fn take<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            Ok(buf)
        }
        let magic: [u8; 4] = take(&mut r, path)?;
        if magic != MAGIC {
            return Err(Error::Validation(format!(
                "{} is not a 3JCK checkpoint",
                path.display()
            )));
        }
        let version = u16::from_le_bytes(take(&mut r, path)?);
        if version != VERSION {
            return Err(Error::Validation(format!(
                "checkpoint version {version} unsupported (expected {VERSION})"
            )));
        }
        let meta_len = u32::from_le_bytes(take(&mut r, path)?) as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|e| Error::io(path, e))?;
        let metadata: serde_json::Value = serde_json::from_slice(&meta)
            .map_err(|e| Error::Validation(format!("corrupt checkpoint metadata: {e}")))?;
        let count = u32::from_le_bytes(take(&mut r, path)?) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut r, path)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|e| Error::io(path, e))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Validation("tensor name is not valid UTF-8".into()))?;
            let n = u64::from_le_bytes(take(&mut r, path)?) as usize;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(&mut r, path)?));
            }
            tensors.insert(name, data);
        }
        Ok(Checkpoint { metadata, tensors })
    }
}
