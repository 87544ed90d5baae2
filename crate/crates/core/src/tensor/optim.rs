//! Parameter updates: Adam (default) and plain SGD, with global-norm clipping.

use super::{Parameter, Scalar};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before the update; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }
}

/// Optimizer state for one parameter set. Slot `i` of the moment buffers
/// corresponds to `params[i]`; callers must keep the parameter list stable.
#[derive(Debug, Clone)]
pub struct Optimizer<F: Scalar = f32> {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter and zero the gradients.
    pub fn step(&mut self, params: &mut [Parameter<F>]) -> Result<()> {
        for p in params.iter() {
            match p.tensor.grad() {
                Some(g) if g.len() == p.tensor.len() => {}
                _ => return Err(Error::MissingGrad(p.name.clone())),
            }
        }

        if let Some(clip) = self.config.grad_clip {
            let mut sq = 0.0f64;
            for p in params.iter() {
                for &g in p.tensor.grad().unwrap() {
                    let g = g.to_f64();
                    sq += g * g;
                }
            }
            let norm = sq.sqrt();
            if norm > clip {
                let scale = F::from_f64(clip / norm);
                for p in params.iter_mut() {
                    for g in p.tensor.grad_mut() {
                        *g *= scale;
                    }
                }
            }
        }

        self.step += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                let lr = F::from_f64(self.config.lr);
                for p in params.iter_mut() {
                    let (data, grad) = p.tensor.data_and_grad();
                    let grad = grad.expect("grad checked above");
                    for (d, &g) in data.iter_mut().zip(grad) {
                        *d = *d - lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params
                        .iter()
                        .map(|p| vec![F::ZERO; p.tensor.len()])
                        .collect();
                    self.v = self.m.clone();
                }
                let b1 = F::from_f64(self.config.beta1);
                let b2 = F::from_f64(self.config.beta2);
                let one_m_b1 = F::from_f64(1.0 - self.config.beta1);
                let one_m_b2 = F::from_f64(1.0 - self.config.beta2);
                let bc1 = 1.0 - self.config.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.config.beta2.powi(self.step as i32);
                // Fold both bias corrections into the step size.
                let alpha = F::from_f64(self.config.lr / bc1);
                let inv_sqrt_bc2 = F::from_f64(1.0 / bc2.sqrt());
                let eps = F::from_f64(self.config.eps);
                for (pi, p) in params.iter_mut().enumerate() {
                    let n = p.tensor.len();
                    let (data, grad) = p.tensor.data_and_grad();
                    let grad = grad.expect("grad checked above");
                    let m = &mut self.m[pi];
                    let v = &mut self.v[pi];
                    for i in 0..n {
                        let g = grad[i];
                        m[i] = b1 * m[i] + one_m_b1 * g;
                        v[i] = b2 * v[i] + one_m_b2 * g * g;
                        let denom = (v[i]).sqrt() * inv_sqrt_bc2 + eps;
                        data[i] = data[i] - alpha * m[i] / denom;
                    }
                }
            }
        }

        for p in params.iter_mut() {
            p.tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(vals: &[f32]) -> Parameter<f32> {
        Parameter::new("p", Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap())
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut params = vec![Parameter::new(
            "embed.src",
            Tensor::<f32>::zeros(&[2, 2]),
        )];
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let err = opt.step(&mut params).unwrap_err();
        assert!(err.to_string().contains("embed.src"), "{err}");
    }

    #[test]
    fn sgd_definition() {
        let mut params = vec![param(&[1.0])];
        params[0].tensor.grad_mut()[0] = 0.5;
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        opt.step(&mut params).unwrap();
        assert!((params[0].tensor.data()[0] - 0.95).abs() < 1e-7);
        // grads zeroed afterward
        assert_eq!(params[0].tensor.grad().unwrap()[0], 0.0);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut params = vec![param(&[1.5, -2.5])];
            params[0].tensor.grad_mut().copy_from_slice(&[3.0, -1.0]);
            let cfg = OptimizerConfig {
                kind,
                lr: 0.0,
                ..OptimizerConfig::default()
            };
            let mut opt = Optimizer::new(cfg);
            opt.step(&mut params).unwrap();
            assert_eq!(params[0].tensor.data(), &[1.5, -2.5]);
        }
    }

    #[test]
    fn adam_shrinks_quadratic() {
        // f(p) = ||p||², df/dp = 2p; 100 steps must reduce f at least 10x.
        // Adam moves ≈lr per step, so start within reach of the optimum.
        let mut params = vec![param(&[0.03, -0.02, 0.025, 0.01])];
        let f = |p: &Parameter<f32>| -> f64 {
            p.tensor.data().iter().map(|&x| (x as f64) * (x as f64)).sum()
        };
        let f0 = f(&params[0]);
        let mut opt = Optimizer::new(OptimizerConfig::default());
        for _ in 0..100 {
            let grads: Vec<f32> = params[0].tensor.data().iter().map(|&x| 2.0 * x).collect();
            params[0].tensor.grad_mut().copy_from_slice(&grads);
            opt.step(&mut params).unwrap();
        }
        let f1 = f(&params[0]);
        assert!(f1 * 10.0 <= f0, "f0={f0} f1={f1}");
    }

    #[test]
    fn clipping_bounds_update_norm() {
        let mut params = vec![param(&[0.0, 0.0])];
        params[0].tensor.grad_mut().copy_from_slice(&[30.0, 40.0]); // norm 50
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 1.0,
            grad_clip: Some(5.0),
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(cfg);
        opt.step(&mut params).unwrap();
        let d = params[0].tensor.data();
        let norm = ((d[0] * d[0] + d[1] * d[1]) as f64).sqrt();
        assert!((norm - 5.0).abs() < 1e-5, "norm={norm}");
    }
}
