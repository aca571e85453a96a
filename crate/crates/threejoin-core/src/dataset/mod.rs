//! Corpus ingestion and zero-shot splits.
//!
//! A corpus is described by a line-delimited JSON manifest: a header line
//! declaring the seen/unseen class partition, followed by one record per
//! sample. Samples of seen classes form the training split, samples of
//! unseen classes the test split; the two class sets must be disjoint.
//! Images and sketches are never paired one-to-one.

mod sampler;
mod synthetic;

pub use sampler::{sample_batch, BatchSpec};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Which stream a sample belongs to. `Edge` samples are always derived
/// from images by the edge-map module, never ingested from a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Sketch,
    Edge,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Image => write!(f, "image"),
            Modality::Sketch => write!(f, "sketch"),
            Modality::Edge => write!(f, "edge"),
        }
    }
}

/// Pixel payload of a sample: a file on disk or an in-memory raster.
#[derive(Debug, Clone)]
pub enum PixelSource {
    Path(PathBuf),
    Memory(Arc<Raster>),
}

/// One image or sketch record with its class label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub modality: Modality,
    /// Index into the owning [`LabelSpace`].
    pub class_label: usize,
    pub source: PixelSource,
}

impl Sample {
    pub fn load_raster(&self) -> Result<Arc<Raster>> {
        match &self.source {
            PixelSource::Path(p) => Ok(Arc::new(Raster::load_png(p)?)),
            PixelSource::Memory(r) => Ok(r.clone()),
        }
    }
}

/// Ordered class names plus the seen/unseen partition. Seen classes come
/// first, so for seen classes the global label index doubles as the
/// classifier output index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSpace {
    class_names: Vec<String>,
    seen_mask: Vec<bool>,
}

impl LabelSpace {
    pub fn new(seen: Vec<String>, unseen: Vec<String>) -> Result<LabelSpace> {
        let mut names_seen = HashSet::new();
        for n in seen.iter().chain(unseen.iter()) {
            if !names_seen.insert(n.clone()) {
                return Err(Error::Validation(format!(
                    "class {n:?} declared more than once across seen/unseen sets"
                )));
            }
        }
        if seen.is_empty() {
            return Err(Error::Validation("no seen classes declared".into()));
        }
        let seen_mask = seen
            .iter()
            .map(|_| true)
            .chain(unseen.iter().map(|_| false))
            .collect();
        let class_names = seen.into_iter().chain(unseen).collect();
        Ok(LabelSpace {
            class_names,
            seen_mask,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_seen(&self) -> usize {
        self.seen_mask.iter().filter(|&&s| s).count()
    }

    pub fn is_seen(&self, label: usize) -> bool {
        self.seen_mask[label]
    }

    pub fn seen_mask(&self) -> &[bool] {
        &self.seen_mask
    }

    pub fn name(&self, label: usize) -> &str {
        &self.class_names[label]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }
}

/// Disjoint seen/unseen partition with the per-split sample lists.
/// Training samples carry seen labels only, test samples unseen only.
#[derive(Debug, Clone)]
pub struct ZeroShotSplit {
    pub train_images: Vec<Sample>,
    pub train_sketches: Vec<Sample>,
    pub test_images: Vec<Sample>,
    pub test_sketches: Vec<Sample>,
    pub label_space: LabelSpace,
}

impl ZeroShotSplit {
    /// Check every structural invariant; called after ingestion and by tests.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in self.train_images.iter().chain(self.train_sketches.iter()) {
            if s.class_label >= self.label_space.num_classes() {
                return Err(Error::Validation(format!(
                    "sample {} has out-of-range label {}",
                    s.id, s.class_label
                )));
            }
            if !self.label_space.is_seen(s.class_label) {
                return Err(Error::Validation(format!(
                    "train sample {} has unseen class {}",
                    s.id,
                    self.label_space.name(s.class_label)
                )));
            }
            if !ids.insert(s.id.clone()) {
                return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
            }
        }
        for s in self.test_images.iter().chain(self.test_sketches.iter()) {
            if s.class_label >= self.label_space.num_classes() {
                return Err(Error::Validation(format!(
                    "sample {} has out-of-range label {}",
                    s.id, s.class_label
                )));
            }
            if self.label_space.is_seen(s.class_label) {
                return Err(Error::Validation(format!(
                    "test sample {} has seen class {}",
                    s.id,
                    self.label_space.name(s.class_label)
                )));
            }
            if !ids.insert(s.id.clone()) {
                return Err(Error::Validation(format!(
                    "sample id {} appears in both train and test",
                    s.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    seen: Vec<String>,
    unseen: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    modality: String,
    class: String,
    path: String,
}

/// Load a manifest file into a split. Record paths are resolved relative
/// to the manifest's directory; every referenced raster file must exist.
pub fn load_manifest(path: &Path) -> Result<ZeroShotSplit> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut lines = BufReader::new(file).lines();

    let header_line = lines
        .next()
        .ok_or_else(|| Error::Validation(format!("{}: empty manifest", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: ManifestHeader = serde_json::from_str(&header_line).map_err(|e| {
        Error::Validation(format!("{}: bad manifest header: {e}", path.display()))
    })?;
    let label_space = LabelSpace::new(header.seen, header.unseen)?;

    let mut split = ZeroShotSplit {
        train_images: Vec::new(),
        train_sketches: Vec::new(),
        test_images: Vec::new(),
        test_sketches: Vec::new(),
        label_space,
    };

    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Validation(format!(
                "{}:{}: bad manifest record: {e}",
                path.display(),
                lineno + 2
            ))
        })?;
        let modality = match rec.modality.as_str() {
            "image" => Modality::Image,
            "sketch" => Modality::Sketch,
            other => {
                return Err(Error::Validation(format!(
                    "{}:{}: unknown modality token {other:?} (edge maps are derived, not ingested)",
                    path.display(),
                    lineno + 2
                )))
            }
        };
        let label = split.label_space.index_of(&rec.class).ok_or_else(|| {
            Error::Validation(format!(
                "{}:{}: class {:?} not declared in header",
                path.display(),
                lineno + 2,
                rec.class
            ))
        })?;
        let raster_path = base.join(&rec.path);
        if !raster_path.is_file() {
            return Err(Error::io(
                &raster_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "referenced raster missing"),
            ));
        }
        let sample = Sample {
            id: rec.id,
            modality,
            class_label: label,
            source: PixelSource::Path(raster_path),
        };
        let seen = split.label_space.is_seen(label);
        match (modality, seen) {
            (Modality::Image, true) => split.train_images.push(sample),
            (Modality::Sketch, true) => split.train_sketches.push(sample),
            (Modality::Image, false) => split.test_images.push(sample),
            (Modality::Sketch, false) => split.test_sketches.push(sample),
            (Modality::Edge, _) => unreachable!("rejected above"),
        }
    }

    split.validate()?;
    Ok(split)
}

/// Write a manifest for a split whose samples live on disk under `base`.
pub fn write_manifest(split: &ZeroShotSplit, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for (i, name) in split.label_space.class_names().iter().enumerate() {
        if split.label_space.is_seen(i) {
            seen.push(name.clone());
        } else {
            unseen.push(name.clone());
        }
    }
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&ManifestHeader { seen, unseen }).unwrap());
    out.push('\n');
    for s in split
        .train_images
        .iter()
        .chain(split.train_sketches.iter())
        .chain(split.test_images.iter())
        .chain(split.test_sketches.iter())
    {
        let p = match &s.source {
            PixelSource::Path(p) => p
                .strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned(),
            PixelSource::Memory(_) => {
                return Err(Error::Validation(format!(
                    "sample {} is in-memory; manifests can only reference files",
                    s.id
                )))
            }
        };
        let rec = ManifestRecord {
            id: s.id.clone(),
            modality: s.modality.to_string(),
            class: split.label_space.name(s.class_label).to_string(),
            path: p,
        };
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    std::fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
