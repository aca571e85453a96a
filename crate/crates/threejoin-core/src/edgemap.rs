//! Edge-map extraction: natural images become black lines on a white
//! background so the sketch/edge encoder sees a sketch-like domain.
//!
//! The extractor is an interface; the shipped reference is a classical
//! Canny pipeline (Gaussian blur, Sobel gradients, non-maximum
//! suppression, hysteresis with thresholds relative to the per-image
//! maximum gradient, then polarity inversion). Learned extractors can be
//! plugged in without touching callers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;

use crate::dataset::{Modality, PixelSource, Sample, ZeroShotSplit};
use crate::error::{Error, Result};
use crate::parallel::par_try_map;
use crate::raster::Raster;

#[derive(Debug, Clone)]
pub struct ExtractorConfig {
    pub gaussian_sigma: f64,
    /// Fraction of the per-image maximum gradient magnitude.
    pub low_threshold: f64,
    pub high_threshold: f64,
    /// Identifier used for the on-disk cache directory.
    pub name: String,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            gaussian_sigma: 1.4,
            low_threshold: 0.1,
            high_threshold: 0.2,
            name: "canny".into(),
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Validation(format!(
                "gaussian_sigma must be positive, got {}",
                self.gaussian_sigma
            )));
        }
        for (label, t) in [
            ("low_threshold", self.low_threshold),
            ("high_threshold", self.high_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Validation(format!(
                    "{label} must lie in (0,1), got {t}"
                )));
            }
        }
        if self.low_threshold >= self.high_threshold {
            return Err(Error::Validation(format!(
                "low_threshold {} must be below high_threshold {}",
                self.low_threshold, self.high_threshold
            )));
        }
        if self.name.is_empty() {
            return Err(Error::Validation("extractor name must be nonempty".into()));
        }
        Ok(())
    }
}

/// A single-channel edge raster tied to the image it came from.
#[derive(Debug, Clone)]
pub struct EdgeMap {
    pub raster: Raster,
    pub source_id: String,
}

pub trait EdgeExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn extract(&self, image: &Raster) -> Result<Raster>;
}

pub struct CannyExtractor {
    config: ExtractorConfig,
}

impl CannyExtractor {
    pub fn new(config: ExtractorConfig) -> Result<CannyExtractor> {
        config.validate()?;
        Ok(CannyExtractor { config })
    }
}

impl EdgeExtractor for CannyExtractor {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn extract(&self, image: &Raster) -> Result<Raster> {
        canny(image, &self.config)
    }
}

fn gaussian_weights(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut w: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Separable Gaussian blur with clamped borders.
fn blur(gray: &Array2<f64>, weights: &[f64]) -> Array2<f64> {
    let (h, w) = gray.dim();
    let radius = (weights.len() / 2) as i64;
    let mut horiz = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wt) in weights.iter().enumerate() {
                let sx = (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                acc += wt * gray[(y, sx)];
            }
            horiz[(y, x)] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wt) in weights.iter().enumerate() {
                let sy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                acc += wt * horiz[(sy, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Sobel gradients with clamped borders; y grows downward.
fn sobel(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let at = |y: i64, x: i64| -> f64 {
        img[(
            y.clamp(0, h as i64 - 1) as usize,
            x.clamp(0, w as i64 - 1) as usize,
        )]
    };
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = |dy: i64, dx: i64| at(y + dy, x + dx);
            gx[(y as usize, x as usize)] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1))
                - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            gy[(y as usize, x as usize)] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1))
                - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
        }
    }
    (gx, gy)
}

/// Keep a pixel only if its magnitude is at least both neighbors' along
/// the gradient direction, quantized to four sectors.
fn non_maximum_suppression(
    mag: &Array2<f64>,
    gx: &Array2<f64>,
    gy: &Array2<f64>,
) -> Array2<f64> {
    use std::f64::consts::PI;
    let (h, w) = mag.dim();
    let mut out = Array2::zeros((h, w));
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let m = mag[(y, x)];
            if m == 0.0 {
                continue;
            }
            let mut a = gy[(y, x)].atan2(gx[(y, x)]);
            if a < 0.0 {
                a += PI;
            }
            let (n1, n2) = if !(PI / 8.0..7.0 * PI / 8.0).contains(&a) {
                (mag[(y, x - 1)], mag[(y, x + 1)])
            } else if a < 3.0 * PI / 8.0 {
                (mag[(y - 1, x - 1)], mag[(y + 1, x + 1)])
            } else if a < 5.0 * PI / 8.0 {
                (mag[(y - 1, x)], mag[(y + 1, x)])
            } else {
                (mag[(y - 1, x + 1)], mag[(y + 1, x - 1)])
            };
            if m >= n1 && m >= n2 {
                out[(y, x)] = m;
            }
        }
    }
    out
}

fn canny(image: &Raster, config: &ExtractorConfig) -> Result<Raster> {
    config.validate()?;
    let (h, w) = (image.height(), image.width());
    let kernel = gaussian_weights(config.gaussian_sigma);
    if h < kernel.len() || w < kernel.len() {
        return Err(Error::Validation(format!(
            "image {w}x{h} smaller than the {}-tap blur kernel for sigma {}",
            kernel.len(),
            config.gaussian_sigma
        )));
    }
    let gray = image.to_gray_f64();
    let blurred = blur(&gray, &kernel);
    let (gx, gy) = sobel(&blurred);
    let mag = Array2::from_shape_fn((h, w), |(y, x)| gx[(y, x)].hypot(gy[(y, x)]));
    let nms = non_maximum_suppression(&mag, &gx, &gy);

    let max_mag = nms.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut edges = vec![false; h * w];
    if max_mag > 0.0 {
        let low = config.low_threshold * max_mag;
        let high = config.high_threshold * max_mag;
        let mut stack: Vec<(usize, usize)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if nms[(y, x)] >= high && !edges[y * w + x] {
                    edges[y * w + x] = true;
                    stack.push((y, x));
                    while let Some((cy, cx)) = stack.pop() {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let ny = cy as i64 + dy;
                                let nx = cx as i64 + dx;
                                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                    continue;
                                }
                                let (ny, nx) = (ny as usize, nx as usize);
                                if !edges[ny * w + nx] && nms[(ny, nx)] >= low {
                                    edges[ny * w + nx] = true;
                                    stack.push((ny, nx));
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(Raster::from_gray_fn(w, h, |x, y| {
        if edges[y * w + x] {
            0
        } else {
            255
        }
    }))
}

/// Extract one edge map. The input must be an image-stream sample; edge
/// maps are derived artifacts and sketches never pass through here.
pub fn extract_edge_map(image: &Sample, config: &ExtractorConfig) -> Result<EdgeMap> {
    if image.modality != Modality::Image {
        return Err(Error::Validation(format!(
            "sample {} has modality {}, expected image",
            image.id, image.modality
        )));
    }
    let raster = image.load_raster()?;
    let edges = canny(&raster, config)?;
    Ok(EdgeMap {
        raster: edges,
        source_id: image.id.clone(),
    })
}

/// One edge map per training image, addressable by source id.
#[derive(Debug, Clone)]
pub struct EdgeCorpus {
    pub extractor_name: String,
    entries: BTreeMap<String, PixelSource>,
    /// How many maps the producing call actually computed (as opposed to
    /// reusing from cache); lets callers observe idempotence.
    pub newly_extracted: usize,
}

impl EdgeCorpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, source_id: &str) -> bool {
        self.entries.contains_key(source_id)
    }

    pub fn source_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn path(&self, source_id: &str) -> Option<&Path> {
        match self.entries.get(source_id)? {
            PixelSource::Path(p) => Some(p),
            PixelSource::Memory(_) => None,
        }
    }

    pub fn load(&self, source_id: &str) -> Result<Arc<Raster>> {
        match self.entries.get(source_id) {
            None => Err(Error::Validation(format!(
                "no edge map for source id {source_id}"
            ))),
            Some(PixelSource::Path(p)) => Ok(Arc::new(Raster::load_png(p)?)),
            Some(PixelSource::Memory(r)) => Ok(r.clone()),
        }
    }
}

/// Extract (or reuse) edge maps for every training image, cached under
/// `<out_root>/edges/<extractor-name>/<class>/<source_id>.png`. Cached
/// files that fail to load are re-extracted with a warning. Safe to run
/// concurrently: writes go through temp-file-then-rename.
pub fn extract_corpus(
    split: &ZeroShotSplit,
    extractor: &dyn EdgeExtractor,
    out_root: &Path,
) -> Result<EdgeCorpus> {
    let base = out_root.join("edges").join(extractor.name());
    let results: Vec<(String, PathBuf, bool)> =
        par_try_map(split.train_images.len(), |i| -> Result<_> {
            let sample = &split.train_images[i];
            let class = split.label_space.name(sample.class_label);
            let path = base.join(class).join(format!("{}.png", sample.id));
            if path.is_file() {
                match Raster::load_png(&path) {
                    Ok(_) => return Ok((sample.id.clone(), path, false)),
                    Err(e) => {
                        log::warn!(
                            "cached edge map {} unreadable ({e}); re-extracting",
                            path.display()
                        );
                    }
                }
            }
            if sample.modality != Modality::Image {
                return Err(Error::Validation(format!(
                    "sample {} has modality {}, expected image",
                    sample.id, sample.modality
                )));
            }
            let raster = sample.load_raster()?;
            let edges = extractor.extract(&raster)?;
            edges.save_png(&path)?;
            Ok((sample.id.clone(), path, true))
        })?;

    let mut entries = BTreeMap::new();
    let mut newly = 0;
    for (id, path, fresh) in results {
        if fresh {
            newly += 1;
        }
        if entries.insert(id.clone(), PixelSource::Path(path)).is_some() {
            return Err(Error::Validation(format!(
                "duplicate source id {id} while building edge corpus"
            )));
        }
    }
    Ok(EdgeCorpus {
        extractor_name: extractor.name().to_string(),
        entries,
        newly_extracted: newly,
    })
}

/// Open an existing cache without extracting anything: entries cover
/// exactly the training images whose maps are already on disk, so a
/// consumer that requires full coverage can fail loudly instead of
/// quietly recomputing.
pub fn open_corpus(
    split: &ZeroShotSplit,
    extractor_name: &str,
    out_root: &Path,
) -> Result<EdgeCorpus> {
    let base = out_root.join("edges").join(extractor_name);
    let mut entries = BTreeMap::new();
    for sample in &split.train_images {
        let class = split.label_space.name(sample.class_label);
        let path = base.join(class).join(format!("{}.png", sample.id));
        if path.is_file() {
            entries.insert(sample.id.clone(), PixelSource::Path(path));
        }
    }
    Ok(EdgeCorpus {
        extractor_name: extractor_name.to_string(),
        entries,
        newly_extracted: 0,
    })
}

/// In-memory variant for tests and ephemeral runs: nothing touches disk.
pub fn extract_corpus_in_memory(
    split: &ZeroShotSplit,
    extractor: &dyn EdgeExtractor,
) -> Result<EdgeCorpus> {
    let results: Vec<(String, Arc<Raster>)> =
        par_try_map(split.train_images.len(), |i| -> Result<_> {
            let sample = &split.train_images[i];
            let raster = sample.load_raster()?;
            let edges = extractor.extract(&raster)?;
            Ok((sample.id.clone(), Arc::new(edges)))
        })?;
    let mut entries = BTreeMap::new();
    let mut newly = 0;
    for (id, raster) in results {
        newly += 1;
        if entries
            .insert(id.clone(), PixelSource::Memory(raster))
            .is_some()
        {
            return Err(Error::Validation(format!(
                "duplicate source id {id} while building edge corpus"
            )));
        }
    }
    Ok(EdgeCorpus {
        extractor_name: extractor.name().to_string(),
        entries,
        newly_extracted: newly,
    })
}
