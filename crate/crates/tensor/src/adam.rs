use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            state: AdamState::zeros_like(params),
        }
    }

    pub fn with_state(config: AdamConfig, state: AdamState<T>) -> Self {
        Self { config, state }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.m.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                reason: format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.state.m.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.state.m[i].shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::Numerical(format!(
                    "non-finite gradient for parameter {i}"
                )));
            }
        }
        self.state.t += 1;
        let c = &self.config;
        let t = self.state.t as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let one = T::one();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = b1 * md[j] + (one - b1) * gj;
                vd[j] = b2 * vd[j] + (one - b2) * gj * gj;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::new(vec![1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0)];
        let before = params.clone();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::zeros(&[2, 3])]).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.01; bias-corrected m̂ = v̂ = 1 so p = -lr / (1 + eps)
        let mut params = scalar_param(0.0);
        let config = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(config, &params);
        adam.step(&mut params, &scalar_param(1.0)).unwrap();
        let p = params[0].data()[0];
        assert!((p - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{p}");
        assert_eq!(adam.state.t, 1);
    }

    #[test]
    fn two_steps_decrease_a_convex_quadratic() {
        // f(p) = (p - 3)^2
        let f = |p: f64| (p - 3.0) * (p - 3.0);
        let mut params = scalar_param(0.0);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &params,
        );
        let start = f(params[0].data()[0]);
        for _ in 0..2 {
            let p = params[0].data()[0];
            adam.step(&mut params, &scalar_param(2.0 * (p - 3.0))).unwrap();
        }
        assert!(f(params[0].data()[0]) < start);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut params = scalar_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let err = adam.step(&mut params, &scalar_param(f64::NAN)).unwrap_err();
        assert!(matches!(err, TensorError::Numerical(_)));
        assert_eq!(params[0].data()[0], 1.0);
        assert_eq!(adam.state.t, 0);
    }
}
