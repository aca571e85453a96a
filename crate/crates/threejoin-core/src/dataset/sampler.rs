//! Deterministic class-balanced batch sampling.
//!
//! Batches are a pure function of (seed, step): no sampler state is
//! carried between calls, so resumed runs and parallel workers see the
//! same sequence. Each batch draws `classes_per_batch` distinct seen
//! classes and pairs images with sketches of the same class; the pairing
//! is per-batch bookkeeping only, not a pixel correspondence.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::{derive_seed, fnv1a64};

use super::{Sample, ZeroShotSplit};

#[derive(Debug, Clone, Copy)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub classes_per_batch: usize,
    pub seed: u64,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.classes_per_batch == 0 {
            return Err(Error::Validation(
                "batch_size and classes_per_batch must be positive".into(),
            ));
        }
        if self.classes_per_batch < 2 {
            return Err(Error::Validation(
                "classes_per_batch must be at least 2 so every anchor has a negative class".into(),
            ));
        }
        if self.batch_size % self.classes_per_batch != 0 {
            return Err(Error::Validation(format!(
                "batch_size {} not divisible by classes_per_batch {}",
                self.batch_size, self.classes_per_batch
            )));
        }
        Ok(())
    }
}

/// Draw one class-balanced batch of (image, sketch) pairs from the
/// training split. Classes without both an image and a sketch are
/// ineligible. Sampling within a class is uniform with replacement.
pub fn sample_batch(
    split: &ZeroShotSplit,
    spec: &BatchSpec,
    step: u64,
) -> Result<Vec<(Sample, Sample)>> {
    spec.validate()?;
    let num_classes = split.label_space.num_classes();
    let mut images_by_class: Vec<Vec<&Sample>> = vec![Vec::new(); num_classes];
    let mut sketches_by_class: Vec<Vec<&Sample>> = vec![Vec::new(); num_classes];
    for s in &split.train_images {
        images_by_class[s.class_label].push(s);
    }
    for s in &split.train_sketches {
        sketches_by_class[s.class_label].push(s);
    }
    let eligible: Vec<usize> = (0..num_classes)
        .filter(|&c| !images_by_class[c].is_empty() && !sketches_by_class[c].is_empty())
        .collect();
    if eligible.len() < 2 {
        return Err(Error::Sampling(format!(
            "only {} class(es) have both images and sketches; need at least 2",
            eligible.len()
        )));
    }
    if eligible.len() < spec.classes_per_batch {
        return Err(Error::Sampling(format!(
            "classes_per_batch={} but only {} eligible classes",
            spec.classes_per_batch,
            eligible.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        derive_seed(spec.seed, fnv1a64(b"batch-sampler")),
        step,
    ));
    let mut pool = eligible;
    pool.shuffle(&mut rng);
    pool.truncate(spec.classes_per_batch);

    let per_class = spec.batch_size / spec.classes_per_batch;
    let mut batch = Vec::with_capacity(spec.batch_size);
    for &c in &pool {
        let imgs = &images_by_class[c];
        let sks = &sketches_by_class[c];
        for _ in 0..per_class {
            let img = imgs[rng.random_range(0..imgs.len())].clone();
            let sk = sks[rng.random_range(0..sks.len())].clone();
            batch.push((img, sk));
        }
    }
    Ok(batch)
}
