use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Adam with decoupled weight decay. Moments and step counts are kept per
/// parameter name, so a parameter that receives no gradient in a step keeps
/// its state untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

/// One parameter handed to [`AdamW::step`].
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub tensor: &'a mut Tensor,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that carries a gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = ParamRef<'a>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(TensorError::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for p in params {
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let st = self
                .state
                .entry(p.name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; grad.len()],
                    v: vec![0.0; grad.len()],
                    steps: 0,
                });
            if st.m.len() != grad.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: vec![st.m.len()],
                    rhs: vec![grad.len()],
                });
            }
            st.steps += 1;
            let bc1 = 1.0 - beta1.powi(st.steps as i32);
            let bc2 = 1.0 - beta2.powi(st.steps as i32);
            let decay = if p.decay {
                1.0 - lr * weight_decay
            } else {
                1.0
            };
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.steps)
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup: usize, base_lr: f64) -> Result<f64> {
    if warmup > total_steps {
        return Err(TensorError::InvalidArgument(format!(
            "warmup {warmup} exceeds total steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(TensorError::InvalidArgument(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let span = total_steps - warmup;
    if span == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup) as f64 / span as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Global L2 norm over all gradient buffers.
pub fn global_grad_norm<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    tensors
        .into_iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<'a>(tensors: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> f64 {
    let mut tensors: Vec<&mut Tensor> = tensors.into_iter().collect();
    let norm = global_grad_norm(tensors.iter().map(|t| &**t));
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for t in tensors.iter_mut() {
            if let Some(g) = t
                .grad()
                .map(|g| g.iter().map(|v| v * factor).collect::<Vec<_>>())
            {
                t.zero_grad();
                t.accumulate_grad(&g).expect("same length");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(p: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(p).with_grad(true);
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    fn one_step(p: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut t = scalar_param(p, g);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: wd,
            ..Default::default()
        });
        opt.step(
            [ParamRef {
                name: "p",
                tensor: &mut t,
                decay: true,
            }],
            lr,
        )
        .unwrap();
        t.data()[0]
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        assert_eq!(one_step(1.7, 0.0, 0.1, 0.0), 1.7);
    }

    #[test]
    fn first_step_has_unit_magnitude() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps).
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((one_step(1.0, 1.0, 0.1, 0.0) - expected).abs() < 1e-15);
        assert!((one_step(1.0, 1.0, 0.1, 0.0) - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay() {
        assert!((one_step(2.0, 0.0, 0.1, 0.1) - 2.0 * (1.0 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_positive_lr_rejected() {
        let mut t = scalar_param(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt
            .step(
                [ParamRef {
                    name: "p",
                    tensor: &mut t,
                    decay: false
                }],
                0.0
            )
            .is_err());
        assert!(opt
            .step(
                [ParamRef {
                    name: "p",
                    tensor: &mut t,
                    decay: false
                }],
                -1.0
            )
            .is_err());
    }

    #[test]
    fn params_without_grad_are_untouched() {
        let mut t = Tensor::scalar(3.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(
            [ParamRef {
                name: "p",
                tensor: &mut t,
                decay: true,
            }],
            0.1,
        )
        .unwrap();
        assert_eq!(t.data()[0], 3.0);
        assert_eq!(opt.steps_taken("p"), 0);
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_schedule(0, 1000, 100, 1e-3).unwrap(), 0.0);
        assert_eq!(lr_schedule(100, 1000, 100, 1e-3).unwrap(), 1e-3);
        let mid = lr_schedule(550, 1000, 100, 1e-3).unwrap();
        assert!((mid - 5e-4).abs() < 1e-12);
        assert!(lr_schedule(1000, 1000, 100, 1e-3).unwrap().abs() < 1e-18);
        assert!(lr_schedule(5, 10, 11, 1e-3).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut a = scalar_param(0.0, 3.0);
        let mut b = scalar_param(0.0, 4.0);
        let norm = clip_grad_norm([&mut a, &mut b], 1.0);
        assert_eq!(norm, 5.0);
        assert!((global_grad_norm([&a, &b]) - 1.0).abs() < 1e-15);
    }
}
