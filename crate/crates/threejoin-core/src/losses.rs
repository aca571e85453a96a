//! Training objectives and their composition.
//!
//! The total objective is kd + λ1·align + λ2·domain + λ3·cls with
//! domain = center + η·triplet. Distillation carries a parameter
//! divergence term γ‖θx−θs‖²F tying the image backbone to the shared
//! sketch/edge backbone. Centers are a per-seen-class running mean of
//! edge retrieval features, updated cumulatively once per step and
//! treated as constants in every gradient (stop-gradient).

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub eta: f64,
    pub margin: f64,
}

impl LossWeights {
    /// Weight set used on Sketchy: (γ, λ1, λ2, λ3, η) = (100, 0.1, 0.1, 0.1, 10).
    pub fn sketchy() -> LossWeights {
        LossWeights {
            gamma: 100.0,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.1,
            eta: 10.0,
            margin: 0.2,
        }
    }

    /// Weight set used on TU-Berlin: (γ, λ1, λ2, λ3, η) = (100, 0.01, 0.01, 1, 100).
    pub fn tu_berlin() -> LossWeights {
        LossWeights {
            gamma: 100.0,
            lambda1: 0.01,
            lambda2: 0.01,
            lambda3: 1.0,
            eta: 100.0,
            margin: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("eta", self.eta),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!(
                    "loss weight {name} must be a non-negative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-seen-class cumulative mean of edge retrieval features.
///
/// `c_y` after t updates equals the arithmetic mean of every class-y row
/// pushed so far in the current epoch; counts of 0 mean "undefined" and
/// reading such a center is a state error. Counts reset at epoch
/// boundaries so early-epoch features do not dominate forever.
#[derive(Debug, Clone)]
pub struct CenterBank {
    centers: Array2<f64>,
    counts: Vec<u64>,
}

impl CenterBank {
    pub fn new(num_seen_classes: usize, dim: usize) -> CenterBank {
        CenterBank {
            centers: Array2::zeros((num_seen_classes, dim)),
            counts: vec![0; num_seen_classes],
        }
    }

    /// Reassemble a bank from checkpointed parts.
    pub fn from_parts(centers: Array2<f64>, counts: Vec<u64>) -> Result<CenterBank> {
        if centers.nrows() != counts.len() {
            return Err(Error::Shape(format!(
                "{} center rows but {} counts",
                centers.nrows(),
                counts.len()
            )));
        }
        Ok(CenterBank { centers, counts })
    }

    pub fn parts(&self) -> (&Array2<f64>, &[u64]) {
        (&self.centers, &self.counts)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts[class]
    }

    pub fn center(&self, class: usize) -> Result<ArrayView1<'_, f64>> {
        if class >= self.counts.len() {
            return Err(Error::Validation(format!(
                "class {class} outside the {} seen classes of the center bank",
                self.counts.len()
            )));
        }
        if self.counts[class] == 0 {
            return Err(Error::State(format!(
                "center for class {class} undefined: update_centers must run before reading"
            )));
        }
        Ok(self.centers.row(class))
    }

    /// Cumulative update: c_y ← (c_y·n + Σ_{y_i=y} f_i) / (n + count_y).
    /// Classes absent from the batch are untouched. Features are
    /// constants here; no gradient ever flows through the bank.
    pub fn update(&mut self, edge_retrieval: &Array2<f64>, labels: &[usize]) -> Result<()> {
        if edge_retrieval.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                edge_retrieval.nrows(),
                labels.len()
            )));
        }
        if edge_retrieval.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "feature dim {} does not match bank dim {}",
                edge_retrieval.ncols(),
                self.dim()
            )));
        }
        check_finite("edge retrieval features", edge_retrieval.iter())?;
        for &y in labels {
            if y >= self.counts.len() {
                return Err(Error::Validation(format!(
                    "label {y} is not a seen class (bank holds {})",
                    self.counts.len()
                )));
            }
        }
        let mut sums = Array2::<f64>::zeros(self.centers.dim());
        let mut batch_counts = vec![0u64; self.counts.len()];
        for (i, &y) in labels.iter().enumerate() {
            let mut row = sums.row_mut(y);
            row += &edge_retrieval.row(i);
            batch_counts[y] += 1;
        }
        for y in 0..self.counts.len() {
            if batch_counts[y] == 0 {
                continue;
            }
            let n = self.counts[y] as f64;
            let b = batch_counts[y] as f64;
            let mut c = self.centers.row_mut(y);
            let blended = (&c * n + &sums.row(y)) / (n + b);
            c.assign(&blended);
            self.counts[y] += batch_counts[y];
        }
        Ok(())
    }

    /// Forget everything; called at epoch boundaries.
    pub fn reset(&mut self) {
        self.centers.fill(0.0);
        self.counts.iter_mut().for_each(|c| *c = 0);
    }
}

fn check_finite<'a>(what: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{what} contain non-finite values")));
        }
    }
    Ok(())
}

/// Row-wise log-softmax, numerically stable.
fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| v - max);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = log_softmax(logits);
    out.mapv_inplace(f64::exp);
    out
}

fn check_logit_pair(teacher: &Array2<f64>, student: &Array2<f64>) -> Result<()> {
    if teacher.dim() != student.dim() {
        return Err(Error::Shape(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    if teacher.ncols() < 2 {
        return Err(Error::Shape(format!(
            "distillation needs at least 2 classes, got {}",
            teacher.ncols()
        )));
    }
    check_finite("teacher logits", teacher.iter())?;
    check_finite("student logits", student.iter())?;
    Ok(())
}

/// Cross-entropy part of distillation: (1/N)·Σᵢ K(qᵢ, pᵢ) with
/// K(p, q) = −Σ_classes q·log p, q = softmax(teacher), p = softmax(student).
/// The teacher is a constant; gradients flow into student logits only.
pub fn kd_cross_entropy(teacher_logits: &Array2<f64>, student_logits: &Array2<f64>) -> Result<f64> {
    check_logit_pair(teacher_logits, student_logits)?;
    let q = softmax(teacher_logits);
    let log_p = log_softmax(student_logits);
    let n = teacher_logits.nrows() as f64;
    Ok(-(&q * &log_p).sum() / n)
}

/// Gradient of [`kd_cross_entropy`] w.r.t. student logits: (p − q)/N.
pub fn kd_cross_entropy_grad(
    teacher_logits: &Array2<f64>,
    student_logits: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_logit_pair(teacher_logits, student_logits)?;
    let q = softmax(teacher_logits);
    let p = softmax(student_logits);
    let n = teacher_logits.nrows() as f64;
    Ok((p - q) / n)
}

/// ‖θx − θs‖²F over paired parameter tensors.
pub fn param_divergence<'a>(
    theta_x: impl IntoIterator<Item = &'a [f64]>,
    theta_s: impl IntoIterator<Item = &'a [f64]>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut xs = theta_x.into_iter();
    let mut ss = theta_s.into_iter();
    loop {
        match (xs.next(), ss.next()) {
            (None, None) => break,
            (Some(a), Some(b)) if a.len() == b.len() => {
                total += a
                    .iter()
                    .zip(b)
                    .map(|(x, s)| (x - s) * (x - s))
                    .sum::<f64>();
            }
            _ => {
                return Err(Error::Shape(
                    "theta_x and theta_s have incompatible tensor lists".into(),
                ))
            }
        }
    }
    Ok(total)
}

/// Full distillation loss: (1/N)·Σ K(q, p) + γ·‖θx − θs‖²F.
pub fn kd_loss(
    teacher_logits: &Array2<f64>,
    student_logits: &Array2<f64>,
    theta_x: &[f64],
    theta_s: &[f64],
    gamma: f64,
) -> Result<f64> {
    let ce = kd_cross_entropy(teacher_logits, student_logits)?;
    let div = param_divergence([theta_x], [theta_s])?;
    Ok(ce + gamma * div)
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean squared Euclidean distance between paired image/edge rows.
/// Row i of each input must come from the same underlying natural image.
pub fn alignment_loss(image_retrieval: &Array2<f64>, edge_retrieval: &Array2<f64>) -> Result<f64> {
    check_same_shape(image_retrieval, edge_retrieval, "alignment inputs")?;
    let n = image_retrieval.nrows() as f64;
    let diff = image_retrieval - edge_retrieval;
    Ok(diff.mapv(|v| v * v).sum() / n)
}

/// Gradients of [`alignment_loss`] w.r.t. (image, edge) features.
pub fn alignment_grad(
    image_retrieval: &Array2<f64>,
    edge_retrieval: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_same_shape(image_retrieval, edge_retrieval, "alignment inputs")?;
    let n = image_retrieval.nrows() as f64;
    let g_img = (image_retrieval - edge_retrieval) * (2.0 / n);
    let g_edge = -&g_img;
    Ok((g_img, g_edge))
}

/// (1/N)·Σᵢ ‖fᵢ − c_{yᵢ}‖²; centers are constants.
pub fn center_loss(
    sketch_retrieval: &Array2<f64>,
    labels: &[usize],
    bank: &CenterBank,
) -> Result<f64> {
    if sketch_retrieval.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            sketch_retrieval.nrows(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let c = bank.center(y)?;
        total += sketch_retrieval
            .row(i)
            .iter()
            .zip(c.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / n)
}

/// Gradient of [`center_loss`] w.r.t. the sketch features: 2(fᵢ − c_{yᵢ})/N.
pub fn center_grad(
    sketch_retrieval: &Array2<f64>,
    labels: &[usize],
    bank: &CenterBank,
) -> Result<Array2<f64>> {
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(sketch_retrieval.dim());
    for (i, &y) in labels.iter().enumerate() {
        let c = bank.center(y)?;
        let mut row = grad.row_mut(i);
        for (g, (a, b)) in row
            .iter_mut()
            .zip(sketch_retrieval.row(i).iter().zip(c.iter()))
        {
            *g = 2.0 * (a - b) / n;
        }
    }
    Ok(grad)
}

fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Index of the sketch closest to class `anchor_class`'s edge center
/// among sketches of other classes; ties go to the lowest index.
pub fn hardest_negative(
    anchor_class: usize,
    sketch_retrieval: &Array2<f64>,
    labels: &[usize],
    bank: &CenterBank,
) -> Result<usize> {
    let c = bank.center(anchor_class)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, &y) in labels.iter().enumerate() {
        if y == anchor_class {
            continue;
        }
        let d = euclidean(c, sketch_retrieval.row(i));
        match best {
            Some((_, bd)) if d >= bd => {}
            _ => best = Some((i, d)),
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| {
        Error::Mining(format!(
            "no sketch outside class {anchor_class} in the batch"
        ))
    })
}

/// (1/N)·Σᵢ max{0, μ + R(c_{yᵢ}, fᵢ) − R(c_{yᵢ}, f_{j(i)})} with the
/// edge class center as anchor and j(i) the hardest in-batch negative.
pub fn triplet_loss(
    sketch_retrieval: &Array2<f64>,
    labels: &[usize],
    bank: &CenterBank,
    mu: f64,
) -> Result<f64> {
    if sketch_retrieval.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            sketch_retrieval.nrows(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let c = bank.center(y)?;
        let j = hardest_negative(y, sketch_retrieval, labels, bank)?;
        let d_pos = euclidean(c, sketch_retrieval.row(i));
        let d_neg = euclidean(c, sketch_retrieval.row(j));
        total += (mu + d_pos - d_neg).max(0.0);
    }
    Ok(total / n)
}

/// Subgradient of [`triplet_loss`] w.r.t. the sketch features; 0 at the
/// hinge kink and at zero-distance degeneracies.
pub fn triplet_grad(
    sketch_retrieval: &Array2<f64>,
    labels: &[usize],
    bank: &CenterBank,
    mu: f64,
) -> Result<Array2<f64>> {
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(sketch_retrieval.dim());
    for (i, &y) in labels.iter().enumerate() {
        let c = bank.center(y)?;
        let j = hardest_negative(y, sketch_retrieval, labels, bank)?;
        let d_pos = euclidean(c, sketch_retrieval.row(i));
        let d_neg = euclidean(c, sketch_retrieval.row(j));
        if mu + d_pos - d_neg <= 0.0 {
            continue;
        }
        if d_pos > 1e-12 {
            let scale = 1.0 / (n * d_pos);
            let c = c.to_owned();
            let fi = sketch_retrieval.row(i).to_owned();
            let mut row = grad.row_mut(i);
            row += &((&fi - &c) * scale);
        }
        if d_neg > 1e-12 {
            let scale = 1.0 / (n * d_neg);
            let c = c.to_owned();
            let fj = sketch_retrieval.row(j).to_owned();
            let mut row = grad.row_mut(j);
            row -= &((&fj - &c) * scale);
        }
    }
    Ok(grad)
}

/// center + η·triplet.
pub fn domain_loss(center: f64, triplet: f64, eta: f64) -> f64 {
    center + eta * triplet
}

/// Mean softmax cross-entropy of `features·w + b` against labels; the
/// single classifier head is shared by the image and sketch streams.
pub fn classification_loss(
    features: &Array2<f64>,
    labels: &[usize],
    weight: &Array2<f64>,
    bias: &Array1<f64>,
) -> Result<f64> {
    let logits = features.dot(weight) + bias;
    softmax_cross_entropy(&logits, labels).map(|(v, _)| v)
}

/// Mean cross-entropy over the batch plus the gradient w.r.t. logits,
/// (softmax − onehot)/N.
pub fn softmax_cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    check_finite("logits", logits.iter())?;
    for &y in labels {
        if y >= logits.ncols() {
            return Err(Error::Shape(format!(
                "label {y} out of range for {} classes",
                logits.ncols()
            )));
        }
    }
    let n = labels.len() as f64;
    let log_p = log_softmax(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= log_p[(i, y)];
    }
    let mut grad = log_p.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[(i, y)] -= 1.0;
    }
    grad /= n;
    Ok((loss / n, grad))
}

/// Scalar values of the enabled terms for one step; disabled terms are
/// `None` and contribute nothing to the total.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermValues {
    pub kd: Option<f64>,
    pub align: Option<f64>,
    pub center: Option<f64>,
    pub triplet: Option<f64>,
    pub cls: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplet: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain: Option<f64>,
    pub cls: f64,
    pub total: f64,
    /// Per-parameter-group gradient norms, for diagnostics and the
    /// "disabled branches receive no gradient" accounting.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub grad_norms: BTreeMap<String, f64>,
}

/// Compose the total objective: kd + λ1·align + λ2·(center + η·triplet) + λ3·cls.
pub fn total_loss(terms: TermValues, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    for (name, v) in [
        ("kd", terms.kd),
        ("align", terms.align),
        ("center", terms.center),
        ("triplet", terms.triplet),
        ("cls", Some(terms.cls)),
    ] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss term {name} is non-finite ({v})"
                )));
            }
        }
    }
    let domain = match (terms.center, terms.triplet) {
        (None, None) => None,
        (c, t) => Some(domain_loss(
            c.unwrap_or(0.0),
            t.unwrap_or(0.0),
            weights.eta,
        )),
    };
    let total = terms.kd.unwrap_or(0.0)
        + weights.lambda1 * terms.align.unwrap_or(0.0)
        + weights.lambda2 * domain.unwrap_or(0.0)
        + weights.lambda3 * terms.cls;
    Ok(LossReport {
        kd: terms.kd,
        align: terms.align,
        center: terms.center,
        triplet: terms.triplet,
        domain,
        cls: terms.cls,
        total,
        grad_norms: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
    }

    fn central_difference(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-3;
        let mut grad = Array2::zeros(x.dim());
        let mut probe = x.clone();
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let orig = probe[(i, j)];
                probe[(i, j)] = orig + h;
                let fp = f(&probe);
                probe[(i, j)] = orig - h;
                let fm = f(&probe);
                probe[(i, j)] = orig;
                grad[(i, j)] = (fp - fm) / (2.0 * h);
            }
        }
        grad
    }

    fn assert_grad_close(analytic: &Array2<f64>, numeric: &Array2<f64>) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = 1.0f64.max(a.abs()).max(n.abs());
            assert!(
                (a - n).abs() / denom < 1e-4,
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn kd_uniform_logits_equal_log4() {
        let t = Array2::zeros((3, 4));
        let s = Array2::zeros((3, 4));
        let theta = vec![1.0, 2.0, 3.0];
        let v = kd_loss(&t, &s, &theta, &theta, 123.0).unwrap();
        assert_relative_eq!(v, 1.3862943611198906, epsilon = 1e-12);
    }

    #[test]
    fn kd_self_distillation_equals_teacher_entropy() {
        let t = array![[2.0, 0.0]];
        let v = kd_loss(&t, &t.clone(), &[], &[], 0.0).unwrap();
        // Independent oracle: q = softmax([2,0]), value = -sum q ln q.
        let e2 = 2.0f64.exp();
        let q = [e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)];
        let oracle: f64 = -q.iter().map(|&p| p * p.ln()).sum::<f64>();
        assert_relative_eq!(v, oracle, epsilon = 1e-12);
        assert_relative_eq!(v, 0.36533385508720767, epsilon = 1e-9);
        assert!((q[0] - 0.880797).abs() < 1e-6 && (q[1] - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn kd_divergence_zero_for_shared_params() {
        let t = array![[1.0, -1.0], [0.5, 0.25]];
        let s = array![[0.0, 0.0], [1.0, 2.0]];
        let theta = vec![3.0, -4.0, 5.5];
        let with_gamma = kd_loss(&t, &s, &theta, &theta, 1e6).unwrap();
        let without = kd_loss(&t, &s, &theta, &theta, 0.0).unwrap();
        assert_relative_eq!(with_gamma, without, epsilon = 1e-12);
    }

    #[test]
    fn kd_rejects_bad_inputs() {
        let ok = Array2::zeros((2, 3));
        let nan = Array2::from_elem((2, 3), f64::NAN);
        assert!(matches!(
            kd_cross_entropy(&nan, &ok).unwrap_err(),
            Error::Numeric(_)
        ));
        let single = Array2::zeros((2, 1));
        assert!(matches!(
            kd_cross_entropy(&single, &single.clone()).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn kd_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = rand_mat(&mut rng, 5, 7, 2.0);
        let s = rand_mat(&mut rng, 5, 7, 2.0);
        let analytic = kd_cross_entropy_grad(&t, &s).unwrap();
        let numeric = central_difference(|x| kd_cross_entropy(&t, x).unwrap(), &s);
        assert_grad_close(&analytic, &numeric);
    }

    #[test]
    fn alignment_examples() {
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        assert_relative_eq!(alignment_loss(&a, &b).unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(alignment_loss(&a, &a.clone()).unwrap(), 0.0);
    }

    #[test]
    fn alignment_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 8, 16, 1.5);
        let b = rand_mat(&mut rng, 8, 16, 1.5);
        let mut oracle = 0.0;
        for i in 0..8 {
            for j in 0..16 {
                let d = a[(i, j)] - b[(i, j)];
                oracle += d * d;
            }
        }
        oracle /= 8.0;
        assert_relative_eq!(alignment_loss(&a, &b).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn alignment_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 4, 6, 1.0);
        let b = rand_mat(&mut rng, 4, 6, 1.0);
        let (ga, gb) = alignment_grad(&a, &b).unwrap();
        let na = central_difference(|x| alignment_loss(x, &b).unwrap(), &a);
        let nb = central_difference(|x| alignment_loss(&a, x).unwrap(), &b);
        assert_grad_close(&ga, &na);
        assert_grad_close(&gb, &nb);
    }

    #[test]
    fn fresh_bank_update_gives_batch_mean() {
        let mut bank = CenterBank::new(3, 2);
        let feats = array![[1.0, 2.0], [3.0, 4.0], [10.0, 20.0]];
        bank.update(&feats, &[1, 1, 2]).unwrap();
        assert_relative_eq!(bank.center(1).unwrap()[0], 2.0);
        assert_relative_eq!(bank.center(1).unwrap()[1], 3.0);
        assert_relative_eq!(bank.center(2).unwrap()[0], 10.0);
        assert!(matches!(bank.center(0).unwrap_err(), Error::State(_)));
        assert_eq!(bank.count(1), 2);
    }

    #[test]
    fn successive_updates_track_running_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bank = CenterBank::new(4, 3);
        let mut all_rows: Vec<Vec<(usize, Vec<f64>)>> = Vec::new();
        for _ in 0..5 {
            let feats = rand_mat(&mut rng, 6, 3, 2.0);
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4usize)).collect();
            bank.update(&feats, &labels).unwrap();
            all_rows.push(
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| (y, feats.row(i).to_vec()))
                    .collect(),
            );
        }
        for class in 0..4 {
            let rows: Vec<&Vec<f64>> = all_rows
                .iter()
                .flatten()
                .filter(|(y, _)| *y == class)
                .map(|(_, r)| r)
                .collect();
            if rows.is_empty() {
                continue;
            }
            for dim in 0..3 {
                let mean = rows.iter().map(|r| r[dim]).sum::<f64>() / rows.len() as f64;
                assert_relative_eq!(bank.center(class).unwrap()[dim], mean, epsilon = 1e-6);
            }
            assert_eq!(bank.count(class), rows.len() as u64);
        }
    }

    #[test]
    fn absent_class_untouched_and_unseen_label_rejected() {
        let mut bank = CenterBank::new(2, 2);
        bank.update(&array![[5.0, 5.0]], &[0]).unwrap();
        let before = bank.center(0).unwrap().to_owned();
        bank.update(&array![[9.0, 9.0]], &[1]).unwrap();
        assert_eq!(bank.center(0).unwrap().to_owned(), before);
        let err = bank.update(&array![[1.0, 1.0]], &[7]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn center_loss_examples() {
        let mut bank = CenterBank::new(1, 2);
        bank.update(&array![[3.0, 4.0]], &[0]).unwrap();
        let v = center_loss(&array![[0.0, 0.0]], &[0], &bank).unwrap();
        assert_relative_eq!(v, 25.0, epsilon = 1e-12);
        let zero = center_loss(&array![[3.0, 4.0]], &[0], &bank).unwrap();
        assert_relative_eq!(zero, 0.0);
    }

    #[test]
    fn center_loss_matches_oracle_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut bank = CenterBank::new(3, 4);
        bank.update(&rand_mat(&mut rng, 9, 4, 1.0), &[0, 1, 2, 0, 1, 2, 0, 1, 2])
            .unwrap();
        let feats = rand_mat(&mut rng, 5, 4, 1.0);
        let labels = [0usize, 2, 1, 1, 0];
        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let c = bank.center(y).unwrap();
            for j in 0..4 {
                let d = feats[(i, j)] - c[j];
                oracle += d * d;
            }
        }
        oracle /= labels.len() as f64;
        let v = center_loss(&feats, &labels, &bank).unwrap();
        assert_relative_eq!(v, oracle, epsilon = 1e-9);

        let analytic = center_grad(&feats, &labels, &bank).unwrap();
        let numeric =
            central_difference(|x| center_loss(x, &labels, &bank).unwrap(), &feats);
        assert_grad_close(&analytic, &numeric);
    }

    #[test]
    fn hardest_negative_singleton_and_tie() {
        let mut bank = CenterBank::new(2, 1);
        bank.update(&array![[0.0], [10.0]], &[0, 1]).unwrap();
        let feats = array![[0.1], [5.0]];
        assert_eq!(hardest_negative(0, &feats, &[0, 1], &bank).unwrap(), 1);
        // Two negatives exactly equidistant: indices 1 and 2 at +/-5.
        let feats = array![[0.1], [5.0], [-5.0]];
        assert_eq!(hardest_negative(0, &feats, &[0, 1, 1], &bank).unwrap(), 1);
        let err = hardest_negative(0, &array![[0.1]], &[0], &bank).unwrap_err();
        assert!(matches!(err, Error::Mining(_)), "{err}");
    }

    #[test]
    fn hardest_negative_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bank = CenterBank::new(4, 3);
        bank.update(&rand_mat(&mut rng, 8, 3, 1.0), &[0, 1, 2, 3, 0, 1, 2, 3])
            .unwrap();
        for _ in 0..25 {
            let feats = rand_mat(&mut rng, 10, 3, 2.0);
            let labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..4usize)).collect();
            for anchor in 0..4 {
                if labels.iter().all(|&y| y == anchor) {
                    continue;
                }
                let got = hardest_negative(anchor, &feats, &labels, &bank).unwrap();
                let c = bank.center(anchor).unwrap();
                let (mut best, mut best_d) = (usize::MAX, f64::INFINITY);
                for (i, &y) in labels.iter().enumerate() {
                    if y == anchor {
                        continue;
                    }
                    let d = feats
                        .row(i)
                        .iter()
                        .zip(c.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                assert_eq!(got, best);
            }
        }
    }

    #[test]
    fn triplet_margin_example() {
        // Two anchors, each at distance 0.5 from its own center while the
        // other class's sketch sits at distance 0.4: per-anchor hinge
        // max(0, 0.2 + 0.5 - 0.4) = 0.3, so the batch mean is 0.3.
        let mut bank = CenterBank::new(2, 1);
        bank.update(&array![[0.0], [10.0]], &[0, 1]).unwrap();
        let feats = array![[0.5], [9.5]];
        let labels = [0usize, 1];
        // anchor 0: d_pos=0.5, negative row 1 at distance 9.5 -> inactive.
        // Rebuild so both anchors are active instead:
        let feats_active = array![[0.5], [0.4]];
        let labels_active = [0usize, 1];
        let mut bank2 = CenterBank::new(2, 1);
        bank2.update(&array![[0.0], [0.9]], &[0, 1]).unwrap();
        // anchor 0: d_pos = 0.5, d_neg = |0.4-0| = 0.4 -> 0.3
        // anchor 1: d_pos = |0.4-0.9| = 0.5, d_neg = |0.5-0.9| = 0.4 -> 0.3
        let v = triplet_loss(&feats_active, &labels_active, &bank2, 0.2).unwrap();
        assert_relative_eq!(v, 0.3, epsilon = 1e-12);

        // Positives on their centers, negatives beyond the margin: 0.
        let inactive = triplet_loss(&feats, &labels, &bank, 0.2).unwrap();
        let feats_on_center = array![[0.0], [10.0]];
        let zero = triplet_loss(&feats_on_center, &labels, &bank, 0.2).unwrap();
        assert_relative_eq!(zero, 0.0);
        assert!(inactive < 0.3);
    }

    #[test]
    fn triplet_matches_oracle_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bank = CenterBank::new(3, 4);
        bank.update(&rand_mat(&mut rng, 6, 4, 1.5), &[0, 1, 2, 0, 1, 2])
            .unwrap();
        let feats = rand_mat(&mut rng, 7, 4, 1.5);
        let labels = [0usize, 1, 2, 0, 1, 2, 0];
        let mu = 0.2;

        let dist = |c: ArrayView1<f64>, i: usize| -> f64 {
            feats
                .row(i)
                .iter()
                .zip(c.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let c = bank.center(y).unwrap();
            let mut d_neg = f64::INFINITY;
            for (j, &yj) in labels.iter().enumerate() {
                if yj != y {
                    d_neg = d_neg.min(dist(c, j));
                }
            }
            oracle += (mu + dist(c, i) - d_neg).max(0.0);
        }
        oracle /= labels.len() as f64;
        let v = triplet_loss(&feats, &labels, &bank, mu).unwrap();
        assert_relative_eq!(v, oracle, epsilon = 1e-9);

        // Gradient check away from hinge kinks and mining ties.
        let analytic = triplet_grad(&feats, &labels, &bank, mu).unwrap();
        let numeric =
            central_difference(|x| triplet_loss(x, &labels, &bank, mu).unwrap(), &feats);
        assert_grad_close(&analytic, &numeric);
    }

    #[test]
    fn domain_loss_arithmetic() {
        assert_relative_eq!(domain_loss(0.5, 0.3, 10.0), 3.5, epsilon = 1e-12);
        assert_relative_eq!(domain_loss(0.7, 0.0, 1234.0), 0.7);
    }

    #[test]
    fn classification_examples() {
        // Saturated true class.
        let feats = array![[1.0]];
        let w = array![[20.0, 0.0, 0.0]];
        let b = Array1::zeros(3);
        let v = classification_loss(&feats, &[0], &w, &b).unwrap();
        assert!(v < 1e-8, "{v}");

        // Uniform logits over 100 classes.
        let feats = Array2::zeros((2, 5));
        let w = Array2::zeros((5, 100));
        let b = Array1::zeros(100);
        let v = classification_loss(&feats, &[17, 92], &w, &b).unwrap();
        assert_relative_eq!(v, 4.605170185988092, epsilon = 1e-9);
    }

    #[test]
    fn classification_matches_oracle_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = rand_mat(&mut rng, 6, 5, 3.0);
        let labels = [0usize, 4, 2, 2, 1, 3];
        let (v, grad) = softmax_cross_entropy(&logits, &labels).unwrap();

        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = logits.row(i).to_vec();
            let z: f64 = row.iter().map(|l| l.exp()).sum();
            oracle -= (row[y].exp() / z).ln();
        }
        oracle /= labels.len() as f64;
        assert_relative_eq!(v, oracle, epsilon = 1e-9);

        let numeric = central_difference(
            |x| softmax_cross_entropy(x, &labels).unwrap().0,
            &logits,
        );
        assert_grad_close(&grad, &numeric);

        let oob = softmax_cross_entropy(&logits, &[0, 1, 2, 3, 4, 9]).unwrap_err();
        assert!(matches!(oob, Error::Shape(_)), "{oob}");
    }

    #[test]
    fn paper_weight_presets() {
        let s = LossWeights::sketchy();
        assert_eq!(
            (s.gamma, s.lambda1, s.lambda2, s.lambda3, s.eta),
            (100.0, 0.1, 0.1, 0.1, 10.0)
        );
        let t = LossWeights::tu_berlin();
        assert_eq!(
            (t.gamma, t.lambda1, t.lambda2, t.lambda3, t.eta),
            (100.0, 0.01, 0.01, 1.0, 100.0)
        );
        assert_eq!(s.margin, 0.2);
    }

    #[test]
    fn total_composition() {
        let terms = TermValues {
            kd: Some(2.0),
            align: Some(3.0),
            center: Some(0.5),
            triplet: Some(0.3),
            cls: 1.5,
        };
        let w = LossWeights::sketchy();
        let report = total_loss(terms, &w).unwrap();
        let domain = 0.5 + 10.0 * 0.3;
        let expect = 2.0 + 0.1 * 3.0 + 0.1 * domain + 0.1 * 1.5;
        assert_relative_eq!(report.total, expect, epsilon = 1e-12);
        assert_relative_eq!(report.domain.unwrap(), domain, epsilon = 1e-12);

        let mut zero = LossWeights::sketchy();
        zero.lambda1 = 0.0;
        zero.lambda2 = 0.0;
        zero.lambda3 = 0.0;
        let r = total_loss(terms, &zero).unwrap();
        assert_relative_eq!(r.total, 2.0, epsilon = 1e-12);

        let bad = TermValues {
            kd: Some(f64::NAN),
            ..terms
        };
        let err = total_loss(bad, &w).unwrap_err();
        assert!(err.to_string().contains("kd"), "{err}");
    }

    proptest! {
        #[test]
        fn report_total_reconstructs(kd in 0.0..10.0f64, align in 0.0..10.0f64,
                                     center in 0.0..10.0f64, triplet in 0.0..10.0f64,
                                     cls in 0.0..10.0f64) {
            let w = LossWeights::sketchy();
            let r = total_loss(TermValues {
                kd: Some(kd), align: Some(align), center: Some(center),
                triplet: Some(triplet), cls,
            }, &w).unwrap();
            let rebuilt = r.kd.unwrap()
                + w.lambda1 * r.align.unwrap()
                + w.lambda2 * r.domain.unwrap()
                + w.lambda3 * r.cls;
            prop_assert!((r.total - rebuilt).abs() <= 1e-6 * rebuilt.abs().max(1.0));
        }

        #[test]
        fn losses_are_non_negative(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6usize;
            let d = 4usize;
            let a = rand_mat(&mut rng, n, d, 2.0);
            let b = rand_mat(&mut rng, n, d, 2.0);
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let mut bank = CenterBank::new(3, d);
            bank.update(&rand_mat(&mut rng, 6, d, 2.0), &[0, 1, 2, 0, 1, 2]).unwrap();

            prop_assert!(alignment_loss(&a, &b).unwrap() >= 0.0);
            prop_assert!(center_loss(&a, &labels, &bank).unwrap() >= 0.0);
            prop_assert!(triplet_loss(&a, &labels, &bank, 0.2).unwrap() >= 0.0);
            let logits = rand_mat(&mut rng, n, 3, 3.0);
            prop_assert!(softmax_cross_entropy(&logits, &labels).unwrap().0 >= 0.0);
            let flat: Vec<f64> = a.iter().cloned().collect();
            let flat_b: Vec<f64> = b.iter().cloned().collect();
            prop_assert!(param_divergence([flat.as_slice()], [flat_b.as_slice()]).unwrap() >= 0.0);
        }

        #[test]
        fn losses_are_permutation_equivariant(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6usize;
            let d = 4usize;
            let a = rand_mat(&mut rng, n, d, 2.0);
            let b = rand_mat(&mut rng, n, d, 2.0);
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let mut bank = CenterBank::new(3, d);
            bank.update(&rand_mat(&mut rng, 6, d, 2.0), &[0, 1, 2, 0, 1, 2]).unwrap();

            // A fixed odd permutation of the batch rows.
            let perm: Vec<usize> = (0..n).map(|i| (i + 3) % n).collect();
            let pa = Array2::from_shape_fn((n, d), |(i, j)| a[(perm[i], j)]);
            let pb = Array2::from_shape_fn((n, d), |(i, j)| b[(perm[i], j)]);
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();

            let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(1.0);
            prop_assert!(close(
                alignment_loss(&a, &b).unwrap(),
                alignment_loss(&pa, &pb).unwrap()
            ));
            prop_assert!(close(
                center_loss(&a, &labels, &bank).unwrap(),
                center_loss(&pa, &pl, &bank).unwrap()
            ));
            prop_assert!(close(
                triplet_loss(&a, &labels, &bank, 0.2).unwrap(),
                triplet_loss(&pa, &pl, &bank, 0.2).unwrap()
            ));
            prop_assert!(close(
                kd_cross_entropy(&a, &b).unwrap(),
                kd_cross_entropy(&pa, &pb).unwrap()
            ));
            let (ce, _) = softmax_cross_entropy(&a, &[0, 1, 2, 0, 1, 2]).unwrap();
            let (pce, _) = softmax_cross_entropy(&pa, &pl.iter().map(|&y| y).collect::<Vec<_>>()).unwrap();
            prop_assert!(close(ce, pce));
        }
    }
}
