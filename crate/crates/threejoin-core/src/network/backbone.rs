//! Small residual CNN used for all three streams: a stem convolution,
//! a few downsampling stages each carrying one two-convolution residual
//! block, then global average pooling. The image stream and the shared
//! sketch/edge stream instantiate this same architecture twice so the
//! parameter divergence term is well-defined elementwise.

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_seed;

use super::layers::{relu, relu_backward, Conv2d};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 3,
            stem_channels: 12,
            stage_channels: vec![16, 24, 32],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Validation("channel counts must be positive".into()));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Validation(
                "stage_channels must be a nonempty list of positive counts".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated nonempty")
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv2d,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl Stage {
    fn map<E>(&self, other: &Stage, mut f: impl FnMut(&Conv2d, &Conv2d) -> E) -> [E; 3] {
        [
            f(&self.down, &other.down),
            f(&self.conv1, &other.conv1),
            f(&self.conv2, &other.conv2),
        ]
    }
}

/// Per-sample activations saved by the forward pass for backprop.
/// Stored post-ReLU; the ReLU mask is recovered from the sign.
#[derive(Debug)]
pub struct BackboneTrace {
    input: Array3<f64>,
    stem_out: Array3<f64>,
    stages: Vec<StageTrace>,
    spatial: (usize, usize),
}

#[derive(Debug)]
struct StageTrace {
    down_out: Array3<f64>,
    block_mid: Array3<f64>,
    block_out: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv2d,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Backbone> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6261636b626f6e65));
        let stem = Conv2d::new(config.input_channels, config.stem_channels, 3, 1, 1, &mut rng);
        let mut stages = Vec::new();
        let mut in_c = config.stem_channels;
        for &out_c in &config.stage_channels {
            stages.push(Stage {
                down: Conv2d::new(in_c, out_c, 3, 2, 1, &mut rng),
                conv1: Conv2d::new(out_c, out_c, 3, 1, 1, &mut rng),
                conv2: Conv2d::new(out_c, out_c, 3, 1, 1, &mut rng),
            });
            in_c = out_c;
        }
        Ok(Backbone {
            config,
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn zeros_like(&self) -> Backbone {
        Backbone {
            config: self.config.clone(),
            stem: self.stem.zeros_like(),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    down: s.down.zeros_like(),
                    conv1: s.conv1.zeros_like(),
                    conv2: s.conv2.zeros_like(),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Backbone) {
        self.stem.add_assign(&other.stem);
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            a.down.add_assign(&b.down);
            a.conv1.add_assign(&b.conv1);
            a.conv2.add_assign(&b.conv2);
        }
    }

    /// Forward with trace for training.
    pub fn forward_traced(&self, x: &Array3<f64>) -> Result<(Array1<f64>, BackboneTrace)> {
        if x.dim().0 != self.config.input_channels {
            return Err(Error::Shape(format!(
                "backbone expects {} input channels, got {}",
                self.config.input_channels,
                x.dim().0
            )));
        }
        let stem_out = relu(&self.stem.forward(x)?);
        let mut cur = stem_out.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let down_out = relu(&stage.down.forward(&cur)?);
            let block_mid = relu(&stage.conv1.forward(&down_out)?);
            let pre = stage.conv2.forward(&block_mid)? + &down_out;
            let block_out = relu(&pre);
            cur = block_out.clone();
            stages.push(StageTrace {
                down_out,
                block_mid,
                block_out,
            });
        }
        let (c, h, w) = cur.dim();
        let scale = 1.0 / (h * w) as f64;
        let mut feat = Array1::zeros(c);
        for ch in 0..c {
            feat[ch] = cur.index_axis(ndarray::Axis(0), ch).sum() * scale;
        }
        Ok((
            feat,
            BackboneTrace {
                input: x.clone(),
                stem_out,
                stages,
                spatial: (h, w),
            },
        ))
    }

    /// Forward without trace, for evaluation/encoding.
    pub fn forward(&self, x: &Array3<f64>) -> Result<Array1<f64>> {
        self.forward_traced(x).map(|(f, _)| f)
    }

    /// Backpropagate a gradient on the pooled feature vector; returns
    /// parameter gradients shaped exactly like the backbone itself.
    pub fn backward(&self, trace: &BackboneTrace, grad_feat: &Array1<f64>) -> Result<Backbone> {
        if grad_feat.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "feature grad has dim {}, backbone produces {}",
                grad_feat.len(),
                self.feature_dim()
            )));
        }
        let mut grads = self.zeros_like();
        let (h, w) = trace.spatial;
        let scale = 1.0 / (h * w) as f64;
        let last_c = self.feature_dim();
        let mut grad = Array3::from_shape_fn((last_c, h, w), |(c, _, _)| grad_feat[c] * scale);

        for (i, stage) in self.stages.iter().enumerate().rev() {
            let tr = &trace.stages[i];
            let grad_pre = relu_backward(&tr.block_out, &grad);
            let (grad_mid_raw, g_conv2) = stage.conv2.backward(&tr.block_mid, &grad_pre)?;
            let grad_mid = relu_backward(&tr.block_mid, &grad_mid_raw);
            let (grad_down_main, g_conv1) = stage.conv1.backward(&tr.down_out, &grad_mid)?;
            let grad_down_out = grad_down_main + &grad_pre;
            let grad_down_pre = relu_backward(&tr.down_out, &grad_down_out);
            let below = if i == 0 {
                &trace.stem_out
            } else {
                &trace.stages[i - 1].block_out
            };
            let (grad_below, g_down) = stage.down.backward(below, &grad_down_pre)?;
            grads.stages[i].down = g_down;
            grads.stages[i].conv1 = g_conv1;
            grads.stages[i].conv2 = g_conv2;
            grad = grad_below;
        }
        let grad_stem_pre = relu_backward(&trace.stem_out, &grad);
        let (_, g_stem) = self.stem.backward(&trace.input, &grad_stem_pre)?;
        grads.stem = g_stem;
        Ok(grads)
    }

    /// Parameter tensors in a fixed documented order:
    /// stem(w,b), then per stage down(w,b), conv1(w,b), conv2(w,b).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = self.stem.tensors();
        for s in &self.stages {
            out.extend(s.down.tensors());
            out.extend(s.conv1.tensors());
            out.extend(s.conv2.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.stem.tensors_mut();
        for s in &mut self.stages {
            out.extend(s.down.tensors_mut());
            out.extend(s.conv1.tensors_mut());
            out.extend(s.conv2.tensors_mut());
        }
        out
    }

    /// Stable names matching [`Backbone::tensors`] order, used as
    /// checkpoint keys under a per-stream prefix.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["stem.weight".to_string(), "stem.bias".to_string()];
        for i in 0..self.stages.len() {
            for layer in ["down", "conv1", "conv2"] {
                names.push(format!("stage{i}.{layer}.weight"));
                names.push(format!("stage{i}.{layer}.bias"));
            }
        }
        names
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Shape compatibility with another instance (for θx vs θs).
    pub fn same_shapes(&self, other: &Backbone) -> bool {
        self.config == other.config
            && self
                .stages
                .iter()
                .zip(&other.stages)
                .all(|(a, b)| a.map(b, |x, y| x.weight.dim() == y.weight.dim()).iter().all(|&v| v))
    }
}
