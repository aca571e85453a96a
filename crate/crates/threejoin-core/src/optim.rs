//! Adam over flat parameter slices. Layers expose `tensors_mut()`;
//! the optimizer only sees `&mut [f64]` groups, so it works unchanged
//! for convolutions, affine heads, and the classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Validation("betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Validation("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// `tensor_lens` is the length of each parameter group, in the same
    /// order the model reports its tensors.
    pub fn new(config: AdamConfig, tensor_lens: &[usize]) -> Result<Adam> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Rebuild an optimizer mid-run, e.g. when resuming a checkpoint.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Result<Adam> {
        config.validate()?;
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape(
                "first and second moment buffers disagree in shape".into(),
            ));
        }
        Ok(Adam { config, step, m, v })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update. `params` and `grads` must match the moment buffers
    /// group-for-group and element-for-element.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} parameter groups, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!(
                    "parameter group {i} has len {} (grad {}), optimizer expects {}",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for k in 0..p.len() {
                let gk = g[k];
                if !gk.is_finite() {
                    return Err(Error::Numeric(
                        "non-finite gradient reached the optimizer".into(),
                    ));
                }
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, step 1 moves each coordinate by
        // lr * g / (|g| + eps) ~= lr * sign(g).
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
            &[3],
        )
        .unwrap();
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -0.7, 0.0];
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_relative_eq!(p[0], 1.0 - 0.1, epsilon = 1e-6);
        assert_relative_eq!(p[1], -2.0 + 0.1, epsilon = 1e-6);
        assert_relative_eq!(p[2], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            &[2],
        )
        .unwrap();
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt = Adam::new(AdamConfig::default(), &[2, 3]).unwrap();
        let mut a = vec![0.0; 2];
        let g = vec![0.0; 2];
        let err = opt.step(&mut [&mut a], &[&g]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_error() {
        let mut opt = Adam::new(AdamConfig::default(), &[1]).unwrap();
        let mut p = vec![1.0];
        let g = vec![f64::NAN];
        assert!(matches!(
            opt.step(&mut [&mut p], &[&g]).unwrap_err(),
            Error::Numeric(_)
        ));
    }

    #[test]
    fn state_survives_serde_round_trip() {
        let mut opt = Adam::new(AdamConfig::default(), &[2]).unwrap();
        let mut p = vec![1.0, 2.0];
        opt.step(&mut [&mut p], &[&[0.1, -0.2][..]]).unwrap();
        let json = serde_json::to_string(&opt).unwrap();
        let mut back: Adam = serde_json::from_str(&json).unwrap();
        let mut p2 = p.clone();
        opt.step(&mut [&mut p], &[&[0.05, 0.05][..]]).unwrap();
        back.step(&mut [&mut p2], &[&[0.05, 0.05][..]]).unwrap();
        assert_eq!(p, p2);
    }
}
