//! Frozen teacher classifier. At desk scale the teacher is the same
//! small residual backbone plus a classifier head, pretrained on the
//! seen classes with plain cross entropy, then frozen. A parameter
//! checksum recorded at freeze time lets callers prove the teacher
//! never moved during a run.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelSpace, Modality, Sample};
use crate::error::{Error, Result};
use crate::losses::softmax_cross_entropy;
use crate::optim::{Adam, AdamConfig};
use crate::parallel::par_try_map;
use crate::util::{derive_seed, fnv1a64, params_checksum};

use super::backbone::{Backbone, BackboneConfig};
use super::check_batch;
use super::layers::Affine;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub backbone: BackboneConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            backbone: BackboneConfig::default(),
            epochs: 3,
            batch_size: 24,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation(
                "teacher epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TeacherModel {
    backbone: Backbone,
    classifier: Affine,
    num_classes: usize,
    checksum: u64,
}

impl TeacherModel {
    /// Reassemble a frozen teacher, e.g. from a checkpoint. The stored
    /// checksum must match the parameters being loaded.
    pub fn from_parts(backbone: Backbone, classifier: Affine, checksum: u64) -> Result<TeacherModel> {
        let num_classes = classifier.bias.len();
        if num_classes < 2 {
            return Err(Error::Validation(
                "teacher must expose at least two classes".into(),
            ));
        }
        let model = TeacherModel {
            backbone,
            classifier,
            num_classes,
            checksum,
        };
        if model.current_checksum() != checksum {
            return Err(Error::Validation(
                "teacher parameters do not match their stored checksum".into(),
            ));
        }
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn classifier(&self) -> &Affine {
        &self.classifier
    }

    fn current_checksum(&self) -> u64 {
        let mut tensors = self.backbone.tensors();
        tensors.extend(self.classifier.tensors());
        params_checksum(tensors)
    }

    /// True when the parameters still hash to the freeze-time checksum.
    pub fn verify_frozen(&self) -> bool {
        self.current_checksum() == self.checksum
    }

    /// Class logits for a batch of rasters, same preprocessing as the
    /// student image stream. No gradients flow here; the caller treats
    /// the result as constant targets.
    pub fn logits(&self, batch: &[Array3<f64>]) -> Result<Array2<f64>> {
        check_batch(batch)?;
        let feats = par_try_map(batch.len(), |i| self.backbone.forward(&batch[i]))?;
        let mut features = Array2::zeros((feats.len(), self.backbone.feature_dim()));
        for (i, f) in feats.into_iter().enumerate() {
            features.row_mut(i).assign(&f);
        }
        self.classifier.forward(&features)
    }
}

/// Pretrain a teacher on seen-class images and freeze it. The sample
/// set must not leak unseen classes into the teacher.
pub fn make_teacher(
    samples: &[Sample],
    label_space: &LabelSpace,
    config: &TeacherConfig,
    seed: u64,
) -> Result<TeacherModel> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("teacher pretrain set is empty".into()));
    }
    for s in samples {
        if s.class_label >= label_space.num_classes() {
            return Err(Error::Validation(format!(
                "sample {} carries label {} outside the label space",
                s.id, s.class_label
            )));
        }
        if !label_space.is_seen(s.class_label) {
            return Err(Error::Validation(format!(
                "sample {} belongs to unseen class {:?}; the teacher must not see it",
                s.id,
                label_space.name(s.class_label)
            )));
        }
        if s.modality != Modality::Image {
            return Err(Error::Validation(format!(
                "teacher pretrains on images only, sample {} is {}",
                s.id, s.modality
            )));
        }
    }
    let num_classes = label_space.num_seen();
    if num_classes < 2 {
        return Err(Error::Validation(
            "teacher needs at least two seen classes".into(),
        ));
    }

    let inputs: Vec<Array3<f64>> = samples
        .iter()
        .map(|s| Ok(s.load_raster()?.to_chw_f64(config.backbone.input_channels)))
        .collect::<Result<_>>()?;
    check_batch(&inputs)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class_label).collect();

    let mut backbone = Backbone::new(
        config.backbone.clone(),
        derive_seed(seed, fnv1a64(b"teacher-backbone")),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, fnv1a64(b"teacher-classifier")));
    let mut classifier = Affine::new(config.backbone.feature_dim(), num_classes, &mut rng);

    let lens: Vec<usize> = backbone
        .tensors()
        .iter()
        .chain(classifier.tensors().iter())
        .map(|t| t.len())
        .collect();
    let mut optimizer = Adam::new(config.optimizer, &lens)?;
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, fnv1a64(b"teacher-shuffle")));

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let outs = par_try_map(chunk.len(), |i| backbone.forward_traced(&inputs[chunk[i]]))?;
            let mut features = Array2::zeros((chunk.len(), backbone.feature_dim()));
            let mut traces = Vec::with_capacity(chunk.len());
            for (i, (f, t)) in outs.into_iter().enumerate() {
                features.row_mut(i).assign(&f);
                traces.push(t);
            }
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = classifier.forward(&features)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "teacher loss became non-finite in epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            batches += 1;

            let (grad_features, grad_classifier) = classifier.backward(&features, &grad_logits)?;
            let per_sample = par_try_map(chunk.len(), |i| {
                backbone.backward(&traces[i], &grad_features.row(i).to_owned())
            })?;
            let mut grad_backbone = backbone.zeros_like();
            for g in &per_sample {
                grad_backbone.add_assign(g);
            }

            let grads: Vec<&[f64]> = grad_backbone
                .tensors()
                .into_iter()
                .chain(grad_classifier.tensors())
                .collect();
            let mut params: Vec<&mut [f64]> = backbone.tensors_mut();
            params.extend(classifier.tensors_mut());
            optimizer.step(&mut params, &grads)?;
        }
        log::debug!(
            "teacher epoch {epoch}: mean batch loss {:.4}",
            epoch_loss / batches.max(1) as f64
        );
    }

    let mut tensors = backbone.tensors();
    tensors.extend(classifier.tensors());
    let checksum = params_checksum(tensors);
    Ok(TeacherModel {
        backbone,
        classifier,
        num_classes,
        checksum,
    })
}
