//! Iterative quantization: PCA to k dimensions, then alternate between
//! binarizing the rotated projections and re-solving the rotation as an
//! orthogonal Procrustes problem. Codes are packed little-endian into
//! 64-bit words; the sign convention at an exact zero projection is
//! bit = 1 (the >= rule), fixed for bit-exact reproducibility.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::util::{derive_seed, fnv1a64};

use super::EmbeddingSet;

#[derive(Debug, Clone)]
pub struct ItqCodec {
    mean: Array1<f64>,
    projection: Array2<f64>,
    rotation: Array2<f64>,
    bits: usize,
}

#[derive(Debug, Clone)]
pub struct HashCodes {
    bits: usize,
    words_per_row: usize,
    words: Vec<u64>,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

impl HashCodes {
    pub fn from_parts(
        bits: usize,
        words: Vec<u64>,
        ids: Vec<String>,
        labels: Vec<usize>,
    ) -> Result<HashCodes> {
        if bits == 0 {
            return Err(Error::Validation("hash codes need at least one bit".into()));
        }
        let words_per_row = bits.div_ceil(64);
        let rows = ids.len();
        if labels.len() != rows || words.len() != rows * words_per_row {
            return Err(Error::Shape(format!(
                "hash codes misaligned: {} ids, {} labels, {} words for {bits} bits",
                rows,
                labels.len(),
                words.len()
            )));
        }
        Ok(HashCodes {
            bits,
            words_per_row,
            words,
            ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    pub fn bit(&self, row: usize, bit: usize) -> bool {
        let word = self.row(row)[bit / 64];
        (word >> (bit % 64)) & 1 == 1
    }
}

pub fn hamming_distance(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Gallery indices by ascending Hamming distance, ties by index.
pub fn rank_hamming(query: &[u64], gallery: &HashCodes) -> Result<Vec<usize>> {
    if query.len() != gallery.words_per_row {
        return Err(Error::Shape(format!(
            "query spans {} words, gallery rows span {}",
            query.len(),
            gallery.words_per_row
        )));
    }
    let mut scored: Vec<(u32, usize)> = (0..gallery.len())
        .map(|i| (hamming_distance(query, gallery.row(i)), i))
        .collect();
    scored.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn sign_matrix(v: &DMatrix<f64>) -> DMatrix<f64> {
    v.map(|x| if x >= 0.0 { 1.0 } else { -1.0 })
}

/// Alternating minimization of ||B - V R||_F^2 from a given starting
/// rotation. Returns the final rotation and the loss recorded after
/// each rotation update; the sequence is non-increasing.
fn alternate(v: &DMatrix<f64>, mut r: DMatrix<f64>, iterations: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut losses = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let b = sign_matrix(&(v * &r));
        let m = v.transpose() * &b;
        let svd = m.svd(true, true);
        let u = svd.u.as_ref().expect("svd requested u");
        let v_t = svd.v_t.as_ref().expect("svd requested v_t");
        r = u * v_t;
        let residual = &b - v * &r;
        let loss = residual.iter().map(|x| x * x).sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::Numeric("ITQ quantization loss became non-finite".into()));
        }
        losses.push(loss);
    }
    Ok((r, losses))
}

/// Random orthogonal start: QR of a seeded Gaussian, with column signs
/// fixed so the factorization is unique.
fn random_rotation(k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, fnv1a64(b"itq-rotation")));
    let g: DMatrix<f64> = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for i in 0..k {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Fit on seen-class training features only; encoding unseen features
/// with the frozen codec keeps the zero-shot premise intact. Returns
/// the codec and the per-iteration quantization loss.
pub fn itq_fit(
    train: &Array2<f64>,
    bits: usize,
    iterations: usize,
    seed: u64,
) -> Result<(ItqCodec, Vec<f64>)> {
    let (n, d) = train.dim();
    if bits == 0 || iterations == 0 {
        return Err(Error::Validation("ITQ needs bits >= 1 and iterations >= 1".into()));
    }
    if n <= bits {
        return Err(Error::Validation(format!(
            "ITQ needs more training rows than bits: {n} rows for {bits} bits"
        )));
    }
    if train.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("ITQ training features contain non-finite values".into()));
    }

    let mean = train.mean_axis(ndarray::Axis(0)).expect("n > 0");
    let centered = train - &mean.view().insert_axis(ndarray::Axis(0));
    let svd = to_na(&centered).svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let top = svd.singular_values[order[0]];
    if top == 0.0 {
        return Err(Error::Validation("ITQ training features have no variance".into()));
    }
    let usable = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > top * 1e-9)
        .count();
    let k = bits.min(usable);
    if k < bits {
        log::warn!("covariance rank {usable} < requested {bits} bits; reducing ITQ code to {k} bits");
    }

    let projection = Array2::from_shape_fn((d, k), |(row, col)| v_t[(order[col], row)]);
    let v_data = to_na(&centered.dot(&projection));
    let (rotation, losses) = alternate(&v_data, random_rotation(k, seed), iterations)?;
    let codec = ItqCodec::from_parts(mean, projection, from_na(&rotation))?;
    Ok((codec, losses))
}

impl ItqCodec {
    pub fn from_parts(
        mean: Array1<f64>,
        projection: Array2<f64>,
        rotation: Array2<f64>,
    ) -> Result<ItqCodec> {
        let (d, k) = projection.dim();
        if mean.len() != d || rotation.dim() != (k, k) {
            return Err(Error::Shape(format!(
                "codec parts disagree: mean {}, projection {d}x{k}, rotation {:?}",
                mean.len(),
                rotation.dim()
            )));
        }
        if k == 0 || k > d {
            return Err(Error::Validation(format!(
                "codec must satisfy 1 <= bits <= dim, got bits {k} for dim {d}"
            )));
        }
        let gram = rotation.t().dot(&rotation);
        let fro: f64 = gram
            .indexed_iter()
            .map(|((i, j), v)| {
                let target = if i == j { 1.0 } else { 0.0 };
                (v - target) * (v - target)
            })
            .sum::<f64>()
            .sqrt();
        if fro > 1e-6 {
            return Err(Error::Numeric(format!(
                "ITQ rotation is not orthogonal: ||R'R - I||_F = {fro:.3e}"
            )));
        }
        Ok(ItqCodec {
            mean,
            projection,
            rotation,
            bits: k,
        })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    pub fn rotation(&self) -> &Array2<f64> {
        &self.rotation
    }

    fn encode_rows(&self, vectors: &Array2<f64>) -> Result<Vec<u64>> {
        if vectors.ncols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "codec expects dim {}, got {}",
                self.mean.len(),
                vectors.ncols()
            )));
        }
        let centered = vectors - &self.mean.view().insert_axis(ndarray::Axis(0));
        let projected = centered.dot(&self.projection).dot(&self.rotation);
        let words_per_row = self.bits.div_ceil(64);
        let mut words = vec![0u64; vectors.nrows() * words_per_row];
        for i in 0..vectors.nrows() {
            for j in 0..self.bits {
                if projected[(i, j)] >= 0.0 {
                    words[i * words_per_row + j / 64] |= 1 << (j % 64);
                }
            }
        }
        Ok(words)
    }

    pub fn encode_set(&self, set: &EmbeddingSet) -> Result<HashCodes> {
        let words = self.encode_rows(&set.vectors)?;
        HashCodes::from_parts(self.bits, words, set.ids.clone(), set.labels.clone())
    }
}
