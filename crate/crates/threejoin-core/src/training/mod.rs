//! Joint training of the three encoder streams.
//!
//! One optimizer step touches both backbones, all three retrieval heads,
//! the distillation head and the shared classifier; the teacher is never
//! updated. Disabled loss terms contribute neither to the total nor to
//! any gradient, so an ablated branch is bit-for-bit inert.

pub mod ablation;
pub mod config_file;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{sample_batch, BatchSpec, LabelSpace, Modality, Sample, ZeroShotSplit};
use crate::edgemap::EdgeCorpus;
use crate::error::{Error, Result};
use crate::losses::{
    alignment_grad, alignment_loss, center_grad, center_loss, kd_cross_entropy,
    kd_cross_entropy_grad, param_divergence, softmax_cross_entropy, total_loss, triplet_grad,
    triplet_loss, CenterBank, LossReport, LossWeights, TermValues,
};
use crate::network::backbone::BackboneConfig;
use crate::network::checkpoint::Checkpoint;
use crate::network::teacher::TeacherModel;
use crate::network::{EncoderStack, NetworkConfig};
use crate::optim::{Adam, AdamConfig};
use crate::parallel::par_try_map;
use crate::retrieval::{EmbeddingSet, Role};
use crate::util::{derive_seed, fnv1a64};

/// Which optional loss terms run. Classification is always on: a variant
/// with every term disabled is the cross-entropy baseline, not a no-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub kd: bool,
    pub align: bool,
    pub center: bool,
    pub triplet: bool,
}

impl Ablation {
    pub fn full() -> Ablation {
        Ablation {
            kd: true,
            align: true,
            center: true,
            triplet: true,
        }
    }

    pub fn cls_only() -> Ablation {
        Ablation {
            kd: false,
            align: false,
            center: false,
            triplet: false,
        }
    }

    /// Edge maps must be loaded if any edge-consuming term is active.
    pub fn needs_edges(&self) -> bool {
        self.align || self.center || self.triplet
    }

    pub fn needs_bank(&self) -> bool {
        self.center || self.triplet
    }

    /// Parse a comma-separated term list like `"cls,kd,align"`. The list
    /// must name `cls` explicitly so a typo cannot silently drop it.
    pub fn parse(spec: &str) -> Result<Ablation> {
        let mut ab = Ablation::cls_only();
        let mut saw_cls = false;
        for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "cls" => saw_cls = true,
                "kd" => ab.kd = true,
                "align" => ab.align = true,
                "center" => ab.center = true,
                "triplet" => ab.triplet = true,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown loss term {other:?} in ablation spec {spec:?}"
                    )))
                }
            }
        }
        if !saw_cls {
            return Err(Error::Validation(format!(
                "ablation spec {spec:?} omits cls; classification is mandatory, list it explicitly"
            )));
        }
        Ok(ab)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cls")?;
        for (on, name) in [
            (self.kd, "kd"),
            (self.align, "align"),
            (self.center, "center"),
            (self.triplet, "triplet"),
        ] {
            if on {
                write!(f, "+{name}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub classes_per_batch: usize,
    pub epochs: usize,
    pub retrieval_dim: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            weights: LossWeights::sketchy(),
            optimizer: AdamConfig::default(),
            batch_size: 24,
            classes_per_batch: 6,
            epochs: 10,
            retrieval_dim: 64,
            seed: 0,
            ablation: Ablation::full(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.backbone.validate()?;
        self.batch_spec().validate()?;
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if self.retrieval_dim == 0 {
            return Err(Error::Validation("retrieval_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.batch_size,
            classes_per_batch: self.classes_per_batch,
            seed: self.seed,
        }
    }
}

/// Everything an optimizer step mutates, bundled for checkpointing.
pub struct TrainState {
    pub stack: EncoderStack,
    pub bank: CenterBank,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken since epoch 0.
    pub step: u64,
}

impl TrainState {
    pub fn new(
        config: &TrainConfig,
        label_space: &LabelSpace,
        teacher: &TeacherModel,
    ) -> Result<TrainState> {
        config.validate()?;
        let net = NetworkConfig {
            backbone: config.backbone.clone(),
            retrieval_dim: config.retrieval_dim,
            num_seen_classes: label_space.num_seen(),
            teacher_classes: teacher.num_classes(),
        };
        let stack = EncoderStack::new(net, derive_seed(config.seed, fnv1a64(b"encoder-stack")))?;
        let bank = CenterBank::new(label_space.num_seen(), config.retrieval_dim);
        let lens: Vec<usize> = stack.tensors().iter().map(|t| t.len()).collect();
        let optimizer = Adam::new(config.optimizer, &lens)?;
        Ok(TrainState {
            stack,
            bank,
            optimizer,
            epoch: 0,
            step: 0,
        })
    }
}

fn l2_norm<'a>(tensors: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    tensors
        .into_iter()
        .flat_map(|t| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn load_inputs(samples: &[&Sample], channels: usize) -> Result<Vec<Array3<f64>>> {
    samples
        .iter()
        .map(|s| Ok(s.load_raster()?.to_chw_f64(channels)))
        .collect()
}

/// Run one joint step on a class-balanced batch of (image, sketch) pairs
/// and apply a single optimizer update. Order inside the step: forward
/// all active streams, fold the edge features into the center bank
/// (stop-gradient), evaluate the enabled terms, then backpropagate and
/// update every trainable tensor at once. The teacher is read-only.
pub fn train_step(
    state: &mut TrainState,
    teacher: &TeacherModel,
    batch: &[(Sample, Sample)],
    edges: &EdgeCorpus,
    config: &TrainConfig,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let ab = config.ablation;
    let w = &config.weights;
    let channels = config.backbone.input_channels;
    let n = batch.len();

    let mut labels = Vec::with_capacity(n);
    for (img, sk) in batch {
        if img.modality != Modality::Image || sk.modality != Modality::Sketch {
            return Err(Error::Validation(format!(
                "batch pair ({}, {}) is not an image/sketch pair",
                img.id, sk.id
            )));
        }
        if img.class_label != sk.class_label {
            return Err(Error::Validation(format!(
                "pair ({}, {}) mixes classes {} and {}",
                img.id, sk.id, img.class_label, sk.class_label
            )));
        }
        labels.push(img.class_label);
    }

    let image_refs: Vec<&Sample> = batch.iter().map(|(i, _)| i).collect();
    let sketch_refs: Vec<&Sample> = batch.iter().map(|(_, s)| s).collect();
    let image_inputs = load_inputs(&image_refs, channels)?;
    let sketch_inputs = load_inputs(&sketch_refs, channels)?;
    let edge_inputs = if ab.needs_edges() {
        let mut v = Vec::with_capacity(n);
        for (img, _) in batch {
            v.push(edges.load(&img.id)?.to_chw_f64(channels));
        }
        Some(v)
    } else {
        None
    };

    let teacher_ref = if ab.kd { Some(teacher) } else { None };
    let img = state.stack.forward_image(&image_inputs, teacher_ref)?;
    let skt = state.stack.forward_sketch(&sketch_inputs)?;
    let edg = match &edge_inputs {
        Some(inputs) => Some(state.stack.forward_edge(inputs)?),
        None => None,
    };

    // Class centers come from the edge stream and are treated as
    // constants by every consumer (stop-gradient).
    if ab.needs_bank() {
        let e = edg.as_ref().expect("needs_edges covers needs_bank");
        state.bank.update(&e.retrieval, &labels)?;
    }

    let dim = state.stack.retrieval_dim();
    let mut terms = TermValues::default();
    let mut grad_rx: Array2<f64> = Array2::zeros((n, dim));
    let mut grad_rs: Array2<f64> = Array2::zeros((n, dim));
    let mut grad_re: Array2<f64> = Array2::zeros((n, dim));
    let mut grad_student: Option<Array2<f64>> = None;

    if ab.kd {
        let t_logits = img
            .teacher_logits
            .as_ref()
            .expect("teacher passed when kd is enabled");
        let ce = kd_cross_entropy(t_logits, &img.student_logits)?;
        let div = param_divergence(
            state.stack.image_backbone.tensors(),
            state.stack.shared_backbone.tensors(),
        )?;
        terms.kd = Some(ce + w.gamma * div);
        grad_student = Some(kd_cross_entropy_grad(t_logits, &img.student_logits)?);
    }
    if ab.align {
        let e = edg.as_ref().expect("align implies needs_edges");
        terms.align = Some(alignment_loss(&img.retrieval, &e.retrieval)?);
        let (g_img, g_edge) = alignment_grad(&img.retrieval, &e.retrieval)?;
        grad_rx += &(g_img * w.lambda1);
        grad_re += &(g_edge * w.lambda1);
    }
    if ab.center {
        terms.center = Some(center_loss(&skt.retrieval, &labels, &state.bank)?);
        grad_rs += &(center_grad(&skt.retrieval, &labels, &state.bank)? * w.lambda2);
    }
    if ab.triplet {
        terms.triplet = Some(triplet_loss(&skt.retrieval, &labels, &state.bank, w.margin)?);
        grad_rs += &(triplet_grad(&skt.retrieval, &labels, &state.bank, w.margin)?
            * (w.lambda2 * w.eta));
    }

    // The classifier sees image and sketch retrieval features as one
    // 2N-row batch, so both streams shape the same decision boundary.
    let mut rcat = Array2::zeros((2 * n, dim));
    rcat.slice_mut(s![..n, ..]).assign(&img.retrieval);
    rcat.slice_mut(s![n.., ..]).assign(&skt.retrieval);
    let mut cat_labels = labels.clone();
    cat_labels.extend_from_slice(&labels);
    let logits = state.stack.classifier.forward(&rcat)?;
    let (cls, grad_logits) = softmax_cross_entropy(&logits, &cat_labels)?;
    terms.cls = cls;

    // A non-finite term aborts before any parameter is touched.
    let mut report = total_loss(terms, w)?;

    let (grad_rcat, grad_classifier) = state
        .stack
        .classifier
        .backward(&rcat, &(grad_logits * w.lambda3))?;
    grad_rx += &grad_rcat.slice(s![..n, ..]);
    grad_rs += &grad_rcat.slice(s![n.., ..]);

    let mut grads = state.stack.zeros_like();
    grads.classifier = grad_classifier;

    let (mut grad_fx, g_psi_x) = state.stack.head_image.backward(&img.features, &grad_rx)?;
    grads.head_image = g_psi_x;
    if let Some(gs) = &grad_student {
        let (g_feat, g_kd) = state.stack.kd_head.backward(&img.features, gs)?;
        grad_fx += &g_feat;
        grads.kd_head = g_kd;
    }
    let (grad_fs, g_psi_s) = state.stack.head_sketch.backward(&skt.features, &grad_rs)?;
    grads.head_sketch = g_psi_s;
    // Without alignment nothing differentiable reaches the edge head
    // (the center bank is stop-gradient), so skip its backward pass.
    let grad_fe = if ab.align {
        let e = edg.as_ref().expect("align implies needs_edges");
        let (g_feat, g_psi_e) = state.stack.head_edge.backward(&e.features, &grad_re)?;
        grads.head_edge = g_psi_e;
        Some(g_feat)
    } else {
        None
    };

    {
        let bb = &state.stack.image_backbone;
        let per = par_try_map(n, |i| bb.backward(&img.traces[i], &grad_fx.row(i).to_owned()))?;
        for g in &per {
            grads.image_backbone.add_assign(g);
        }
    }
    {
        let bb = &state.stack.shared_backbone;
        let per = par_try_map(n, |i| bb.backward(&skt.traces[i], &grad_fs.row(i).to_owned()))?;
        for g in &per {
            grads.shared_backbone.add_assign(g);
        }
        if let (Some(gfe), Some(e)) = (&grad_fe, &edg) {
            let per = par_try_map(n, |i| bb.backward(&e.traces[i], &gfe.row(i).to_owned()))?;
            for g in &per {
                grads.shared_backbone.add_assign(g);
            }
        }
    }

    // d/dθ of γ‖θx − θs‖²F pulls the two backbones toward each other.
    if ab.kd {
        let theta_x = state.stack.image_backbone.tensors();
        let theta_s = state.stack.shared_backbone.tensors();
        let mut gx = grads.image_backbone.tensors_mut();
        let mut gs = grads.shared_backbone.tensors_mut();
        for (k, (tx, ts)) in theta_x.iter().zip(theta_s.iter()).enumerate() {
            for (j, (&x, &s)) in tx.iter().zip(ts.iter()).enumerate() {
                let d = 2.0 * w.gamma * (x - s);
                gx[k][j] += d;
                gs[k][j] -= d;
            }
        }
    }

    for (name, norm) in [
        ("theta_x", l2_norm(grads.image_backbone.tensors())),
        ("theta_s", l2_norm(grads.shared_backbone.tensors())),
        ("psi_x", l2_norm(grads.head_image.tensors())),
        ("psi_e", l2_norm(grads.head_edge.tensors())),
        ("psi_s", l2_norm(grads.head_sketch.tensors())),
        ("kd_head", l2_norm(grads.kd_head.tensors())),
        ("classifier", l2_norm(grads.classifier.tensors())),
    ] {
        report.grad_norms.insert(name.into(), norm);
    }

    let grad_slices = grads.tensors();
    let mut params = state.stack.tensors_mut();
    state.optimizer.step(&mut params, &grad_slices)?;
    state.step += 1;
    Ok(report)
}

/// Batches per epoch: one pass over the smaller of the two training
/// modalities, final partial batch counted.
pub fn steps_per_epoch(split: &ZeroShotSplit, batch_size: usize) -> usize {
    let n = split.train_images.len().min(split.train_sketches.len());
    n.div_ceil(batch_size).max(1)
}

#[derive(Debug, Serialize)]
struct MetricsRecord<'a> {
    epoch: usize,
    step: u64,
    #[serde(flatten)]
    report: &'a LossReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub stack: EncoderStack,
    pub label_space: LabelSpace,
    /// Checkpoint written after the final epoch.
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Steps executed by this call (zero when the run was already complete).
    pub steps_run: u64,
    pub first_total: Option<f64>,
    pub last_total: Option<f64>,
}

/// Train for `config.epochs` epochs, writing `epoch_NNN.ck` checkpoints
/// and a `metrics.jsonl` loss log under `out_dir`. If a compatible
/// checkpoint already exists there, training resumes after its epoch and
/// reproduces exactly the parameters an uninterrupted run would have
/// produced: batches are a pure function of (seed, step) and the center
/// bank is rebuilt from scratch at every epoch start.
pub fn train(
    split: &ZeroShotSplit,
    edges: &EdgeCorpus,
    teacher: &TeacherModel,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    split.validate()?;
    for s in &split.train_images {
        if !edges.contains(&s.id) {
            return Err(Error::Validation(format!(
                "no edge map cached for training image {}; extract edges first",
                s.id
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut state = TrainState::new(config, &split.label_space, teacher)?;
    let mut start_epoch = 0;
    if let Some((epoch, path)) = latest_checkpoint(out_dir)? {
        load_state(&mut state, &path, teacher, config)?;
        start_epoch = epoch;
        log::info!(
            "resuming from {} with {} epoch(s) already complete",
            path.display(),
            epoch
        );
    }
    if start_epoch > config.epochs {
        return Err(Error::Validation(format!(
            "checkpoint in {} is {} epochs deep but the run asks for {}",
            out_dir.display(),
            start_epoch,
            config.epochs
        )));
    }

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let spe = steps_per_epoch(split, config.batch_size);
    let spec = config.batch_spec();
    let mut first_total = None;
    let mut last_total = None;
    let mut steps_run = 0u64;
    let mut checkpoint = out_dir.join(format!("epoch_{start_epoch:03}.ck"));
    for epoch in start_epoch..config.epochs {
        state.bank.reset();
        for s in 0..spe {
            let global = (epoch * spe + s) as u64;
            let batch = sample_batch(split, &spec, global)?;
            let report = train_step(&mut state, teacher, &batch, edges, config)?;
            if first_total.is_none() {
                first_total = Some(report.total);
            }
            last_total = Some(report.total);
            let record = MetricsRecord {
                epoch,
                step: global,
                report: &report,
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Validation(format!("metrics serialization failed: {e}")))?;
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            steps_run += 1;
        }
        state.epoch = epoch + 1;
        checkpoint = out_dir.join(format!("epoch_{:03}.ck", epoch + 1));
        save_state(&checkpoint, &state, teacher, config, &split.label_space)?;
        log::info!(
            "epoch {}/{} done, total {:.6}",
            epoch + 1,
            config.epochs,
            last_total.unwrap_or(f64::NAN)
        );
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(TrainOutcome {
        stack: state.stack,
        label_space: split.label_space.clone(),
        checkpoint,
        metrics: metrics_path,
        steps_run,
        first_total,
        last_total,
    })
}

fn teacher_tensor_names(teacher: &TeacherModel) -> Vec<String> {
    let mut names = teacher.backbone().tensor_names();
    names.push("classifier.weight".into());
    names.push("classifier.bias".into());
    names
}

fn teacher_tensors<'a>(teacher: &'a TeacherModel) -> Vec<&'a [f64]> {
    let mut tensors = teacher.backbone().tensors();
    tensors.extend(teacher.classifier().tensors());
    tensors
}

fn save_state(
    path: &Path,
    state: &TrainState,
    teacher: &TeacherModel,
    config: &TrainConfig,
    label_space: &LabelSpace,
) -> Result<()> {
    let to_value = |what: &str, v: serde_json::Result<serde_json::Value>| {
        v.map_err(|e| Error::Validation(format!("cannot serialize {what}: {e}")))
    };
    let metadata = json!({
        "kind": "3join-train-state",
        "epoch": state.epoch,
        "step": state.step,
        "adam_step": state.optimizer.step_count(),
        "teacher_checksum": format!("{:016x}", teacher.checksum()),
        "config": to_value("config", serde_json::to_value(config))?,
        "network": to_value("network config", serde_json::to_value(state.stack.config()))?,
        "label_space": to_value("label space", serde_json::to_value(label_space))?,
    });
    let mut ck = Checkpoint::new(metadata);
    ck.insert_group("stack", &state.stack.tensor_names(), &state.stack.tensors());
    ck.insert_group("teacher", &teacher_tensor_names(teacher), &teacher_tensors(teacher));
    let (m, v) = state.optimizer.moments();
    for (i, (mm, vv)) in m.iter().zip(v.iter()).enumerate() {
        ck.insert(format!("adam.m.{i:04}"), mm.clone());
        ck.insert(format!("adam.v.{i:04}"), vv.clone());
    }
    ck.save(path)
}

/// Checkpoints written by `train`, named by completed epoch count.
fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(num) = name
            .strip_prefix("epoch_")
            .and_then(|rest| rest.strip_suffix(".ck"))
        else {
            continue;
        };
        let Ok(epoch) = num.parse::<usize>() else {
            continue;
        };
        if best.as_ref().is_none_or(|(e, _)| epoch > *e) {
            best = Some((epoch, entry.path()));
        }
    }
    Ok(best)
}

fn metadata_u64(ck: &Checkpoint, key: &str) -> Result<u64> {
    ck.metadata[key].as_u64().ok_or_else(|| {
        Error::Validation(format!("checkpoint metadata is missing integer {key:?}"))
    })
}

/// `epochs` is excluded from the compatibility check: extending a run by
/// asking for more epochs is exactly what resume is for.
fn config_fingerprint(config: &TrainConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(config)
        .map_err(|e| Error::Validation(format!("cannot serialize config: {e}")))?;
    v.as_object_mut()
        .expect("TrainConfig serializes to an object")
        .remove("epochs");
    Ok(v)
}

fn load_state(
    state: &mut TrainState,
    path: &Path,
    teacher: &TeacherModel,
    config: &TrainConfig,
) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let stored = ck.metadata["config"].clone();
    let mut stored_cmp = stored;
    if let Some(obj) = stored_cmp.as_object_mut() {
        obj.remove("epochs");
    }
    if stored_cmp != config_fingerprint(config)? {
        return Err(Error::Validation(format!(
            "checkpoint {} was written under a different configuration",
            path.display()
        )));
    }
    let want = format!("{:016x}", teacher.checksum());
    if ck.metadata["teacher_checksum"].as_str() != Some(want.as_str()) {
        return Err(Error::Validation(format!(
            "checkpoint {} was distilled from a different teacher",
            path.display()
        )));
    }
    let names = state.stack.tensor_names();
    ck.restore_group("stack", &names, &mut state.stack.tensors_mut())?;

    let lens: Vec<usize> = state.stack.tensors().iter().map(|t| t.len()).collect();
    let mut m = Vec::with_capacity(lens.len());
    let mut v = Vec::with_capacity(lens.len());
    for (i, &len) in lens.iter().enumerate() {
        let mm = ck.tensor(&format!("adam.m.{i:04}"))?;
        let vv = ck.tensor(&format!("adam.v.{i:04}"))?;
        if mm.len() != len || vv.len() != len {
            return Err(Error::Shape(format!(
                "optimizer moment {i} has {} values, parameters have {len}",
                mm.len()
            )));
        }
        m.push(mm.to_vec());
        v.push(vv.to_vec());
    }
    state.optimizer = Adam::from_parts(config.optimizer, metadata_u64(&ck, "adam_step")?, m, v)?;
    state.epoch = metadata_u64(&ck, "epoch")? as usize;
    state.step = metadata_u64(&ck, "step")?;
    state.bank.reset();
    Ok(())
}

/// Rehydrate a trained stack (and the label space it was trained under)
/// for encoding and retrieval; no optimizer or teacher state is needed.
pub fn load_checkpoint_stack(path: &Path) -> Result<(EncoderStack, LabelSpace)> {
    let ck = Checkpoint::load(path)?;
    let net: NetworkConfig = serde_json::from_value(ck.metadata["network"].clone())
        .map_err(|e| Error::Validation(format!("bad network config in checkpoint: {e}")))?;
    let label_space: LabelSpace = serde_json::from_value(ck.metadata["label_space"].clone())
        .map_err(|e| Error::Validation(format!("bad label space in checkpoint: {e}")))?;
    let mut stack = EncoderStack::new(net, 0)?;
    let names = stack.tensor_names();
    ck.restore_group("stack", &names, &mut stack.tensors_mut())?;
    Ok((stack, label_space))
}

/// Encode one modality's samples into retrieval space, in deterministic
/// order, batched so memory stays flat on large galleries.
pub fn encode_embeddings(
    stack: &EncoderStack,
    samples: &[Sample],
    role: Role,
    chunk_size: usize,
) -> Result<EmbeddingSet> {
    if samples.is_empty() {
        return Err(Error::Validation("no samples to encode".into()));
    }
    let modality = samples[0].modality;
    if samples.iter().any(|s| s.modality != modality) {
        return Err(Error::Validation(
            "encode_embeddings expects samples of a single modality".into(),
        ));
    }
    let channels = stack.config().backbone.input_channels;
    let chunk = chunk_size.max(1);
    let mut vectors = Array2::zeros((samples.len(), stack.retrieval_dim()));
    let mut offset = 0;
    for group in samples.chunks(chunk) {
        let refs: Vec<&Sample> = group.iter().collect();
        let inputs = load_inputs(&refs, channels)?;
        let encoded = match modality {
            Modality::Image => stack.encode_images(&inputs)?,
            Modality::Sketch => stack.encode_sketches(&inputs)?,
            Modality::Edge => stack.encode_edges(&inputs)?,
        };
        vectors
            .slice_mut(s![offset..offset + group.len(), ..])
            .assign(&encoded);
        offset += group.len();
    }
    let ids = samples.iter().map(|s| s.id.clone()).collect();
    let labels = samples.iter().map(|s| s.class_label).collect();
    EmbeddingSet::new(ids, labels, vectors, role)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_corpus, SyntheticSpec};
    use crate::edgemap::{extract_corpus, CannyExtractor, ExtractorConfig};
    use crate::network::teacher::{make_teacher, TeacherConfig};
    use tempfile::TempDir;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            input_channels: 3,
            stem_channels: 3,
            stage_channels: vec![4],
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            weights: LossWeights::sketchy(),
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            batch_size: 4,
            classes_per_batch: 2,
            epochs: 2,
            retrieval_dim: 6,
            seed: 11,
            ablation: Ablation::full(),
            backbone: tiny_backbone(),
        }
    }

    struct Fixture {
        _dir: TempDir,
        root: PathBuf,
        split: ZeroShotSplit,
        edges: EdgeCorpus,
        teacher: TeacherModel,
        config: TrainConfig,
    }

    fn fixture() -> Fixture {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let split = generate_synthetic_corpus(
            &root.join("data"),
            &SyntheticSpec {
                num_classes: 4,
                images_per_class: 3,
                sketches_per_class: 3,
                image_size: 32,
                seed: 5,
                seen_classes: Some(3),
            },
        )
        .unwrap();
        let extractor = CannyExtractor::new(ExtractorConfig::default()).unwrap();
        let edges = extract_corpus(&split, &extractor, &root.join("edges")).unwrap();
        let teacher = make_teacher(
            &split.train_images,
            &split.label_space,
            &TeacherConfig {
                backbone: tiny_backbone(),
                epochs: 2,
                batch_size: 4,
                optimizer: AdamConfig::default(),
            },
            7,
        )
        .unwrap();
        Fixture {
            _dir: dir,
            root,
            split,
            edges,
            teacher,
            config: tiny_config(),
        }
    }

    fn one_step(f: &Fixture, config: &TrainConfig) -> (TrainState, LossReport) {
        let mut state = TrainState::new(config, &f.split.label_space, &f.teacher).unwrap();
        let batch = sample_batch(&f.split, &config.batch_spec(), 0).unwrap();
        let report = train_step(&mut state, &f.teacher, &batch, &f.edges, config).unwrap();
        (state, report)
    }

    #[test]
    fn ablation_parse_and_display() {
        let ab = Ablation::parse("cls,kd,align").unwrap();
        assert!(ab.kd && ab.align && !ab.center && !ab.triplet);
        assert_eq!(ab.to_string(), "cls+kd+align");
        assert_eq!(Ablation::parse("cls").unwrap(), Ablation::cls_only());
        assert_eq!(
            Ablation::parse(" cls , kd , align , center , triplet ").unwrap(),
            Ablation::full()
        );
        assert!(Ablation::parse("kd,align").is_err(), "cls is mandatory");
        assert!(Ablation::parse("cls,spam").is_err());
        let round = Ablation::parse(&Ablation::full().to_string().replace('+', ",")).unwrap();
        assert_eq!(round, Ablation::full());
    }

    #[test]
    fn config_rejects_zero_epochs_and_bad_batch() {
        let mut c = tiny_config();
        c.epochs = 0;
        assert!(matches!(c.validate(), Err(Error::Validation(_))));
        let mut c = tiny_config();
        c.batch_size = 5;
        assert!(c.validate().is_err(), "5 not divisible by 2 classes");
    }

    #[test]
    fn step_is_deterministic_for_a_fixed_seed() {
        let f = fixture();
        let (_, a) = one_step(&f, &f.config);
        let (_, b) = one_step(&f, &f.config);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn cls_only_reports_no_optional_terms_and_dead_branches() {
        let f = fixture();
        let mut config = f.config.clone();
        config.ablation = Ablation::cls_only();
        let (_, report) = one_step(&f, &config);
        assert!(report.kd.is_none());
        assert!(report.align.is_none());
        assert!(report.center.is_none());
        assert!(report.triplet.is_none());
        assert!(report.domain.is_none());
        assert!(report.total > 0.0);
        assert_eq!(report.grad_norms["psi_e"], 0.0);
        assert_eq!(report.grad_norms["kd_head"], 0.0);
        assert!(report.grad_norms["psi_x"] > 0.0);
        assert!(report.grad_norms["psi_s"] > 0.0);
        assert!(report.grad_norms["classifier"] > 0.0);
    }

    #[test]
    fn disabling_align_zeroes_the_edge_head_gradient() {
        let f = fixture();
        let mut config = f.config.clone();
        config.ablation = Ablation {
            align: false,
            ..Ablation::full()
        };
        let (_, report) = one_step(&f, &config);
        // Centers still consume edge features, but through a stop-gradient.
        assert!(report.center.is_some());
        assert_eq!(report.grad_norms["psi_e"], 0.0);
        assert!(report.grad_norms["psi_s"] > 0.0);
    }

    #[test]
    fn full_ablation_reports_every_term_and_feeds_every_branch() {
        let f = fixture();
        let (_, report) = one_step(&f, &f.config);
        assert!(report.kd.is_some());
        assert!(report.align.is_some());
        assert!(report.center.is_some());
        assert!(report.triplet.is_some());
        assert!(report.domain.is_some());
        for (name, norm) in &report.grad_norms {
            assert!(*norm > 0.0, "branch {name} received no gradient");
        }
        let expected = report.kd.unwrap()
            + f.config.weights.lambda1 * report.align.unwrap()
            + f.config.weights.lambda2 * report.domain.unwrap()
            + f.config.weights.lambda3 * report.cls;
        assert!((report.total - expected).abs() < 1e-12);
    }

    #[test]
    fn kd_divergence_penalty_is_zero_at_start_then_grows() {
        let f = fixture();
        let mut state = TrainState::new(&f.config, &f.split.label_space, &f.teacher).unwrap();
        let div0 = param_divergence(
            state.stack.image_backbone.tensors(),
            state.stack.shared_backbone.tensors(),
        )
        .unwrap();
        assert_eq!(div0, 0.0, "shared backbone starts as a clone");
        let batch = sample_batch(&f.split, &f.config.batch_spec(), 0).unwrap();
        train_step(&mut state, &f.teacher, &batch, &f.edges, &f.config).unwrap();
        let div1 = param_divergence(
            state.stack.image_backbone.tensors(),
            state.stack.shared_backbone.tensors(),
        )
        .unwrap();
        assert!(div1 > 0.0, "streams should diverge once trained");
    }

    #[test]
    fn train_writes_metrics_and_checkpoints_without_touching_the_teacher() {
        let f = fixture();
        let before = f.teacher.checksum();
        let out = f.root.join("run");
        let outcome = train(&f.split, &f.edges, &f.teacher, &f.config, &out).unwrap();
        assert_eq!(f.teacher.checksum(), before);
        assert!(f.teacher.verify_frozen());

        let spe = steps_per_epoch(&f.split, f.config.batch_size);
        assert_eq!(outcome.steps_run, (spe * f.config.epochs) as u64);
        assert!(out.join("epoch_001.ck").is_file());
        assert!(out.join("epoch_002.ck").is_file());
        assert_eq!(outcome.checkpoint, out.join("epoch_002.ck"));

        let log = fs::read_to_string(&outcome.metrics).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), spe * f.config.epochs);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["total"].is_number());
            assert!(v["epoch"].is_number());
            assert!(v["step"].is_number());
            assert!(v["grad_norms"]["theta_x"].is_number());
        }
    }

    #[test]
    fn same_seed_reproduces_the_metrics_log_and_a_new_seed_does_not() {
        let f = fixture();
        let a = train(&f.split, &f.edges, &f.teacher, &f.config, &f.root.join("a")).unwrap();
        let b = train(&f.split, &f.edges, &f.teacher, &f.config, &f.root.join("b")).unwrap();
        let log_a = fs::read_to_string(&a.metrics).unwrap();
        let log_b = fs::read_to_string(&b.metrics).unwrap();
        assert_eq!(log_a, log_b);

        let mut reseeded = f.config.clone();
        reseeded.seed = 999;
        let c = train(&f.split, &f.edges, &f.teacher, &reseeded, &f.root.join("c")).unwrap();
        assert_ne!(log_a, fs::read_to_string(&c.metrics).unwrap());
    }

    #[test]
    fn resume_matches_an_uninterrupted_run_bit_for_bit() {
        let f = fixture();
        let mut three = f.config.clone();
        three.epochs = 3;
        let dir_a = f.root.join("uninterrupted");
        train(&f.split, &f.edges, &f.teacher, &three, &dir_a).unwrap();

        // Simulate an interruption after epoch 2, then extend to 3.
        let dir_b = f.root.join("resumed");
        let mut two = three.clone();
        two.epochs = 2;
        train(&f.split, &f.edges, &f.teacher, &two, &dir_b).unwrap();
        let resumed = train(&f.split, &f.edges, &f.teacher, &three, &dir_b).unwrap();
        let spe = steps_per_epoch(&f.split, f.config.batch_size) as u64;
        assert_eq!(resumed.steps_run, spe, "only the third epoch should run");

        let a = fs::read(dir_a.join("epoch_003.ck")).unwrap();
        let b = fs::read(dir_b.join("epoch_003.ck")).unwrap();
        assert_eq!(a, b, "resumed checkpoint must be byte-identical");
    }

    #[test]
    fn completed_run_is_a_no_op_and_stale_partial_logs_do_not_grow() {
        let f = fixture();
        let out = f.root.join("run");
        let first = train(&f.split, &f.edges, &f.teacher, &f.config, &out).unwrap();
        let log_len = fs::read_to_string(&first.metrics).unwrap().lines().count();
        let again = train(&f.split, &f.edges, &f.teacher, &f.config, &out).unwrap();
        assert_eq!(again.steps_run, 0);
        assert_eq!(again.first_total, None);
        assert_eq!(
            fs::read_to_string(&again.metrics).unwrap().lines().count(),
            log_len
        );
    }

    #[test]
    fn resume_rejects_a_different_config_or_teacher() {
        let f = fixture();
        let out = f.root.join("run");
        train(&f.split, &f.edges, &f.teacher, &f.config, &out).unwrap();

        let mut other = f.config.clone();
        other.retrieval_dim = 8;
        let err = train(&f.split, &f.edges, &f.teacher, &other, &out).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("different configuration"));

        let other_teacher = make_teacher(
            &f.split.train_images,
            &f.split.label_space,
            &TeacherConfig {
                backbone: tiny_backbone(),
                epochs: 1,
                batch_size: 4,
                optimizer: AdamConfig::default(),
            },
            99,
        )
        .unwrap();
        let err = train(&f.split, &f.edges, &other_teacher, &f.config, &out).unwrap_err();
        assert!(err.to_string().contains("different teacher"));
    }

    #[test]
    fn missing_edge_map_is_a_data_error_naming_the_image() {
        let f = fixture();
        let mut split = f.split.clone();
        let mut extra = split.train_images[0].clone();
        extra.id = "orphan_im".into();
        split.train_images.push(extra);
        let err = train(&split, &f.edges, &f.teacher, &f.config, &f.root.join("x")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("orphan_im"));
    }

    #[test]
    fn checkpoint_reload_reproduces_the_trained_encoder() {
        let f = fixture();
        let out = f.root.join("run");
        let outcome = train(&f.split, &f.edges, &f.teacher, &f.config, &out).unwrap();
        let (stack, space) = load_checkpoint_stack(&outcome.checkpoint).unwrap();
        assert_eq!(stack.params_checksum(), outcome.stack.params_checksum());
        assert_eq!(space.num_seen(), f.split.label_space.num_seen());

        let q1 = encode_embeddings(&outcome.stack, &f.split.test_sketches, Role::Query, 8).unwrap();
        let q2 = encode_embeddings(&stack, &f.split.test_sketches, Role::Query, 8).unwrap();
        assert_eq!(q1.vectors, q2.vectors);
    }

    #[test]
    fn encode_embeddings_chunking_is_invisible() {
        let f = fixture();
        let state = TrainState::new(&f.config, &f.split.label_space, &f.teacher).unwrap();
        let big = encode_embeddings(&state.stack, &f.split.test_images, Role::Gallery, 64).unwrap();
        let small = encode_embeddings(&state.stack, &f.split.test_images, Role::Gallery, 2).unwrap();
        assert_eq!(big.vectors, small.vectors);
        assert_eq!(big.ids, small.ids);
        assert_eq!(big.len(), f.split.test_images.len());
    }

    #[test]
    fn encode_embeddings_rejects_mixed_modalities() {
        let f = fixture();
        let state = TrainState::new(&f.config, &f.split.label_space, &f.teacher).unwrap();
        let mut mixed = f.split.test_images.clone();
        mixed.push(f.split.test_sketches[0].clone());
        let err = encode_embeddings(&state.stack, &mixed, Role::Gallery, 8).unwrap_err();
        assert!(err.to_string().contains("single modality"));
    }
}
