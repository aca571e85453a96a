//! Three-stream encoder stack: an image backbone (theta_x), a backbone
//! shared by the sketch and edge streams (theta_s = theta_e), three
//! independent affine retrieval heads (psi_x, psi_e, psi_s), a student
//! logit head for distillation, and a classifier shared by the image
//! and sketch streams.

pub mod backbone;
pub mod checkpoint;
pub mod layers;
pub mod teacher;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::par_try_map;
use crate::util::{derive_seed, fnv1a64, params_checksum};

use backbone::{Backbone, BackboneConfig, BackboneTrace};
use layers::Affine;
use teacher::TeacherModel;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    pub retrieval_dim: usize,
    pub num_seen_classes: usize,
    pub teacher_classes: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.retrieval_dim == 0 {
            return Err(Error::Validation("retrieval_dim must be positive".into()));
        }
        if self.num_seen_classes < 2 {
            return Err(Error::Validation(
                "classifier needs at least two seen classes".into(),
            ));
        }
        if self.teacher_classes < 2 {
            return Err(Error::Validation(
                "teacher must expose at least two classes".into(),
            ));
        }
        Ok(())
    }
}

/// Image stream outputs: backbone features f^x, retrieval features
/// F_x(f^x), student logits for distillation, and the frozen teacher's
/// logits when a teacher is supplied.
#[derive(Debug)]
pub struct ImageForward {
    pub features: Array2<f64>,
    pub retrieval: Array2<f64>,
    pub student_logits: Array2<f64>,
    pub teacher_logits: Option<Array2<f64>>,
    pub traces: Vec<BackboneTrace>,
}

/// Sketch stream outputs; `logits` come from the shared classifier
/// applied to the retrieval features.
#[derive(Debug)]
pub struct SketchForward {
    pub features: Array2<f64>,
    pub retrieval: Array2<f64>,
    pub logits: Array2<f64>,
    pub traces: Vec<BackboneTrace>,
}

#[derive(Debug)]
pub struct EdgeForward {
    pub features: Array2<f64>,
    pub retrieval: Array2<f64>,
    pub traces: Vec<BackboneTrace>,
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    config: NetworkConfig,
    pub image_backbone: Backbone,
    pub shared_backbone: Backbone,
    pub head_image: Affine,
    pub head_edge: Affine,
    pub head_sketch: Affine,
    pub kd_head: Affine,
    pub classifier: Affine,
}

pub(crate) fn check_batch(batch: &[Array3<f64>]) -> Result<()> {
    let first = match batch.first() {
        Some(x) => x.dim(),
        None => return Err(Error::Shape("empty batch".into())),
    };
    for (i, x) in batch.iter().enumerate() {
        if x.dim() != first {
            return Err(Error::Shape(format!(
                "raster {i} has shape {:?}, batch leads with {first:?}",
                x.dim()
            )));
        }
    }
    Ok(())
}

fn stack_rows(rows: Vec<ndarray::Array1<f64>>) -> Array2<f64> {
    let dim = rows[0].len();
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    out
}

impl EncoderStack {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<EncoderStack> {
        config.validate()?;
        let image_backbone = Backbone::new(
            config.backbone.clone(),
            derive_seed(seed, fnv1a64(b"image-backbone")),
        )?;
        // The shared sketch/edge backbone starts as an exact copy of the
        // image backbone so the parameter divergence penalty starts at
        // zero and measures drift accumulated during training.
        let shared_backbone = image_backbone.clone();
        let feat = config.backbone.feature_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, fnv1a64(b"heads")));
        let head_image = Affine::new(feat, config.retrieval_dim, &mut rng);
        let head_edge = Affine::new(feat, config.retrieval_dim, &mut rng);
        let head_sketch = Affine::new(feat, config.retrieval_dim, &mut rng);
        let kd_head = Affine::new(feat, config.teacher_classes, &mut rng);
        let classifier = Affine::new(config.retrieval_dim, config.num_seen_classes, &mut rng);
        Ok(EncoderStack {
            config,
            image_backbone,
            shared_backbone,
            head_image,
            head_edge,
            head_sketch,
            kd_head,
            classifier,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn retrieval_dim(&self) -> usize {
        self.config.retrieval_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.backbone.feature_dim()
    }

    fn backbone_batch(
        &self,
        backbone: &Backbone,
        batch: &[Array3<f64>],
    ) -> Result<(Array2<f64>, Vec<BackboneTrace>)> {
        check_batch(batch)?;
        let outs = par_try_map(batch.len(), |i| backbone.forward_traced(&batch[i]))?;
        let (feats, traces): (Vec<_>, Vec<_>) = outs.into_iter().unzip();
        Ok((stack_rows(feats), traces))
    }

    fn backbone_features(
        &self,
        backbone: &Backbone,
        batch: &[Array3<f64>],
    ) -> Result<Array2<f64>> {
        check_batch(batch)?;
        let feats = par_try_map(batch.len(), |i| backbone.forward(&batch[i]))?;
        Ok(stack_rows(feats))
    }

    /// Traced forward for training. Teacher logits are computed without
    /// traces; the teacher never receives gradients.
    pub fn forward_image(
        &self,
        batch: &[Array3<f64>],
        teacher: Option<&TeacherModel>,
    ) -> Result<ImageForward> {
        let (features, traces) = self.backbone_batch(&self.image_backbone, batch)?;
        let retrieval = self.head_image.forward(&features)?;
        let student_logits = self.kd_head.forward(&features)?;
        let teacher_logits = match teacher {
            Some(t) => Some(t.logits(batch)?),
            None => None,
        };
        Ok(ImageForward {
            features,
            retrieval,
            student_logits,
            teacher_logits,
            traces,
        })
    }

    pub fn forward_sketch(&self, batch: &[Array3<f64>]) -> Result<SketchForward> {
        let (features, traces) = self.backbone_batch(&self.shared_backbone, batch)?;
        let retrieval = self.head_sketch.forward(&features)?;
        let logits = self.classifier.forward(&retrieval)?;
        Ok(SketchForward {
            features,
            retrieval,
            logits,
            traces,
        })
    }

    pub fn forward_edge(&self, batch: &[Array3<f64>]) -> Result<EdgeForward> {
        let (features, traces) = self.backbone_batch(&self.shared_backbone, batch)?;
        let retrieval = self.head_edge.forward(&features)?;
        Ok(EdgeForward {
            features,
            retrieval,
            traces,
        })
    }

    /// Shared classifier over retrieval features (image and sketch
    /// streams use the same weights).
    pub fn classify(&self, retrieval: &Array2<f64>) -> Result<Array2<f64>> {
        self.classifier.forward(retrieval)
    }

    /// Trace-free retrieval encodings for indexing and querying.
    pub fn encode_images(&self, batch: &[Array3<f64>]) -> Result<Array2<f64>> {
        let features = self.backbone_features(&self.image_backbone, batch)?;
        self.head_image.forward(&features)
    }

    pub fn encode_sketches(&self, batch: &[Array3<f64>]) -> Result<Array2<f64>> {
        let features = self.backbone_features(&self.shared_backbone, batch)?;
        self.head_sketch.forward(&features)
    }

    pub fn encode_edges(&self, batch: &[Array3<f64>]) -> Result<Array2<f64>> {
        let features = self.backbone_features(&self.shared_backbone, batch)?;
        self.head_edge.forward(&features)
    }

    pub fn zeros_like(&self) -> EncoderStack {
        EncoderStack {
            config: self.config.clone(),
            image_backbone: self.image_backbone.zeros_like(),
            shared_backbone: self.shared_backbone.zeros_like(),
            head_image: self.head_image.zeros_like(),
            head_edge: self.head_edge.zeros_like(),
            head_sketch: self.head_sketch.zeros_like(),
            kd_head: self.kd_head.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderStack) {
        self.image_backbone.add_assign(&other.image_backbone);
        self.shared_backbone.add_assign(&other.shared_backbone);
        self.head_image.add_assign(&other.head_image);
        self.head_edge.add_assign(&other.head_edge);
        self.head_sketch.add_assign(&other.head_sketch);
        self.kd_head.add_assign(&other.kd_head);
        self.classifier.add_assign(&other.classifier);
    }

    /// All trainable tensors in checkpoint order; the teacher is not a
    /// member of the stack and stays frozen elsewhere.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.image_backbone.tensors();
        out.extend(self.shared_backbone.tensors());
        out.extend(self.head_image.tensors());
        out.extend(self.head_edge.tensors());
        out.extend(self.head_sketch.tensors());
        out.extend(self.kd_head.tensors());
        out.extend(self.classifier.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.image_backbone.tensors_mut();
        out.extend(self.shared_backbone.tensors_mut());
        out.extend(self.head_image.tensors_mut());
        out.extend(self.head_edge.tensors_mut());
        out.extend(self.head_sketch.tensors_mut());
        out.extend(self.kd_head.tensors_mut());
        out.extend(self.classifier.tensors_mut());
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .image_backbone
            .tensor_names()
            .into_iter()
            .map(|n| format!("theta_x.{n}"))
            .collect();
        names.extend(
            self.shared_backbone
                .tensor_names()
                .into_iter()
                .map(|n| format!("theta_s.{n}")),
        );
        for head in ["psi_x", "psi_e", "psi_s", "kd_head", "classifier"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    pub fn params_checksum(&self) -> u64 {
        params_checksum(self.tensors())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            backbone: BackboneConfig {
                input_channels: 3,
                stem_channels: 3,
                stage_channels: vec![4, 4],
            },
            retrieval_dim: 6,
            num_seen_classes: 3,
            teacher_classes: 3,
        }
    }

    fn batch(n: usize, seed: u64) -> Vec<Array3<f64>> {
        (0..n)
            .map(|i| {
                Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
                    (((c + y + x) as f64 + seed as f64 + i as f64) * 0.61).sin() * 0.5 + 0.5
                })
            })
            .collect()
    }

    #[test]
    fn retrieval_features_have_batch_by_dim_shape() {
        // 24 images at dim 512 and 24 sketches at dim 64, the two
        // published operating points.
        for dim in [512usize, 64] {
            let stack = EncoderStack::new(
                NetworkConfig {
                    retrieval_dim: dim,
                    ..tiny_config()
                },
                11,
            )
            .unwrap();
            let imgs = batch(24, 5);
            let out = stack.forward_image(&imgs, None).unwrap();
            assert_eq!(out.retrieval.dim(), (24, dim));
            let sk = stack.forward_sketch(&imgs).unwrap();
            assert_eq!(sk.retrieval.dim(), (24, dim));
            assert_eq!(sk.logits.dim(), (24, 3));
        }
    }

    #[test]
    fn duplicated_image_gives_identical_rows() {
        let stack = EncoderStack::new(tiny_config(), 3).unwrap();
        let mut imgs = batch(2, 9);
        imgs.push(imgs[0].clone());
        let out = stack.forward_image(&imgs, None).unwrap();
        assert_eq!(out.retrieval.row(0), out.retrieval.row(2));
        assert_eq!(out.features.row(0), out.features.row(2));
        assert_eq!(out.student_logits.row(0), out.student_logits.row(2));
    }

    #[test]
    fn empty_batch_is_a_shape_error() {
        let stack = EncoderStack::new(tiny_config(), 3).unwrap();
        let empty: Vec<Array3<f64>> = Vec::new();
        assert!(matches!(
            stack.forward_image(&empty, None).unwrap_err(),
            Error::Shape(_)
        ));
        assert!(matches!(
            stack.forward_sketch(&empty).unwrap_err(),
            Error::Shape(_)
        ));
        assert!(matches!(
            stack.forward_edge(&empty).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn mismatched_raster_dims_rejected() {
        let stack = EncoderStack::new(tiny_config(), 3).unwrap();
        let mut imgs = batch(2, 1);
        imgs.push(Array3::zeros((3, 12, 12)));
        assert!(matches!(
            stack.forward_image(&imgs, None).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn sketch_and_edge_share_backbone_but_not_heads() {
        let stack = EncoderStack::new(tiny_config(), 21).unwrap();
        let b = batch(4, 2);
        let sk = stack.forward_sketch(&b).unwrap();
        let ed = stack.forward_edge(&b).unwrap();
        assert_eq!(sk.features, ed.features);
        assert_ne!(sk.retrieval, ed.retrieval);
    }

    #[test]
    fn perturbing_a_shared_parameter_moves_both_streams_identically() {
        let mut stack = EncoderStack::new(tiny_config(), 7).unwrap();
        let b = batch(3, 4);
        let before_sk = stack.forward_sketch(&b).unwrap().features;
        let before_ed = stack.forward_edge(&b).unwrap().features;

        stack.shared_backbone.tensors_mut()[0][0] += 0.5;
        let after_sk = stack.forward_sketch(&b).unwrap().features;
        let after_ed = stack.forward_edge(&b).unwrap().features;

        assert_ne!(before_sk, after_sk, "perturbation must reach the sketch stream");
        assert_ne!(before_ed, after_ed, "perturbation must reach the edge stream");
        assert_eq!(after_sk, after_ed, "streams must stay bitwise equal");
    }

    #[test]
    fn all_white_edge_batch_is_finite() {
        let stack = EncoderStack::new(tiny_config(), 5).unwrap();
        let whites: Vec<Array3<f64>> = (0..3).map(|_| Array3::ones((3, 16, 16))).collect();
        let out = stack.forward_edge(&whites).unwrap();
        assert!(out.retrieval.iter().all(|v| v.is_finite()));
        assert!(out.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn image_and_shared_backbones_start_identical() {
        let stack = EncoderStack::new(tiny_config(), 13).unwrap();
        let ix: Vec<f64> = stack
            .image_backbone
            .tensors()
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect();
        let sx: Vec<f64> = stack
            .shared_backbone
            .tensors()
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect();
        assert_eq!(ix, sx);
    }

    #[test]
    fn tensor_names_match_tensor_count() {
        let stack = EncoderStack::new(tiny_config(), 1).unwrap();
        let names = stack.tensor_names();
        assert_eq!(names.len(), stack.tensors().len());
        assert!(names.iter().any(|n| n == "theta_s.stage1.conv2.weight"));
        assert!(names.iter().any(|n| n == "classifier.bias"));
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn encode_matches_traced_forward() {
        let stack = EncoderStack::new(tiny_config(), 2).unwrap();
        let b = batch(4, 8);
        let traced = stack.forward_image(&b, None).unwrap();
        let plain = stack.encode_images(&b).unwrap();
        assert_eq!(traced.retrieval, plain);
    }
}
