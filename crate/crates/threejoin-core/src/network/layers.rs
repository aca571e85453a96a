//! Differentiable building blocks with hand-written backward passes.
//!
//! Everything runs in f64. Convolutions lower to im2col + GEMM so the
//! heavy lifting stays inside ndarray's matrix multiply.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Lay out every kernel window of `x` as one column.
/// Output shape: (in_c·kh·kw, oh·ow).
pub fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter column gradients back onto the input.
pub fn col2im(
    cols: &Array2<f64>,
    input_dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c, h, w) = input_dim;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += cols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    x
}

/// Square-kernel convolution; weights (out_c, in_c, k, k).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let weight = Array4::from_shape_fn((out_c, in_c, k, k), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        Conv2d {
            weight,
            bias: Array1::zeros(out_c),
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Conv2d {
        Conv2d {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_dim(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = input;
        let (out_c, in_c, k, _) = self.weight.dim();
        if c != in_c {
            return Err(Error::Shape(format!(
                "conv expects {in_c} input channels, got {c}"
            )));
        }
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(Error::Shape(format!(
                "input {h}x{w} too small for kernel {k} with pad {}",
                self.pad
            )));
        }
        Ok((
            out_c,
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        ))
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let (out_c, oh, ow) = self.output_dim(x.dim())?;
        let k = self.kernel();
        let cols = im2col(x, k, self.stride, self.pad);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, cols.nrows()))
            .expect("contiguous kernel");
        let mut out = w_mat.dot(&cols);
        for (o, mut row) in out.rows_mut().into_iter().enumerate() {
            row += self.bias[o];
        }
        Ok(out
            .into_shape_with_order((out_c, oh, ow))
            .expect("shape arithmetic"))
    }

    /// Returns (grad wrt input, grad wrt parameters).
    pub fn backward(&self, x: &Array3<f64>, grad_out: &Array3<f64>) -> Result<(Array3<f64>, Conv2d)> {
        let (out_c, oh, ow) = self.output_dim(x.dim())?;
        if grad_out.dim() != (out_c, oh, ow) {
            return Err(Error::Shape(format!(
                "grad_out {:?} does not match conv output {:?}",
                grad_out.dim(),
                (out_c, oh, ow)
            )));
        }
        let k = self.kernel();
        let cols = im2col(x, k, self.stride, self.pad);
        let g_mat = grad_out
            .view()
            .into_shape_with_order((out_c, oh * ow))
            .expect("contiguous grad");

        let grad_w = g_mat.dot(&cols.t());
        let grad_b = g_mat.sum_axis(ndarray::Axis(1));
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, cols.nrows()))
            .expect("contiguous kernel");
        let grad_cols = w_mat.t().dot(&g_mat);
        let grad_x = col2im(&grad_cols, x.dim(), k, self.stride, self.pad);

        let mut grads = self.zeros_like();
        grads.weight = grad_w
            .into_shape_with_order(self.weight.dim())
            .expect("shape arithmetic");
        grads.bias = grad_b;
        Ok((grad_x, grads))
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn add_assign(&mut self, other: &Conv2d) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

/// Fully connected layer on row-major batches: y = x·W + b.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Affine {
        let std = (2.0 / in_dim as f64).sqrt();
        let weight = Array2::from_shape_fn((in_dim, out_dim), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        Affine {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Affine {
        Affine {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "affine expects {} input features, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }

    /// Returns (grad wrt input, grad wrt parameters).
    pub fn backward(&self, x: &Array2<f64>, grad_out: &Array2<f64>) -> Result<(Array2<f64>, Affine)> {
        if grad_out.dim() != (x.nrows(), self.out_dim()) {
            return Err(Error::Shape(format!(
                "grad_out {:?} does not match affine output ({}, {})",
                grad_out.dim(),
                x.nrows(),
                self.out_dim()
            )));
        }
        let grad_x = grad_out.dot(&self.weight.t());
        let mut grads = self.zeros_like();
        grads.weight = x.t().dot(grad_out);
        grads.bias = grad_out.sum_axis(ndarray::Axis(0));
        Ok((grad_x, grads))
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn add_assign(&mut self, other: &Affine) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the POST-activation values: the mask
/// `post > 0` matches `pre > 0` except exactly at 0, where the
/// subgradient is 0 either way.
pub fn relu_backward(post: &Array3<f64>, grad: &Array3<f64>) -> Array3<f64> {
    let mut out = grad.clone();
    out.zip_mut_with(post, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    out
}
