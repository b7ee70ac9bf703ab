use serde::{Deserialize, Serialize};

use super::tensor::{lit, Real, Tensor};
use super::GradError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter list, in the list's order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// One bias-corrected Adam update of every parameter, then clears grads.
    ///
    /// Every parameter with `requires_grad` must carry a gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<(), GradError> {
        if let Some(i) = params
            .iter()
            .position(|p| p.requires_grad && p.grad.is_none())
        {
            return Err(GradError::MissingGrad(i));
        }
        if params.len() != self.first.len() {
            return Err(GradError::ShapeMismatch {
                op: "adam",
                left: vec![params.len()],
                right: vec![self.first.len()],
            });
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let one = T::one();
        let corr1 = lit::<T>(1.0 - c.beta1.powi(t));
        let corr2 = lit::<T>(1.0 - c.beta2.powi(t));
        let (lr, eps) = (lit::<T>(c.lr), lit::<T>(c.eps));

        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let Some(grad) = p.grad.take() else { continue };
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::scalar(v).with_grad()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .with_grad()];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        p[0].grad = Some(vec![0.0; 3]);
        adam.step(&mut p).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0, 0.5]);
        assert!(p[0].grad.is_none());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = vec![scalar_param(1.0)];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        assert_eq!(adam.step(&mut p), Err(GradError::MissingGrad(0)));
    }

    /// Scalar recurrence for f(x) = x^2 written out independently.
    fn reference_adam(x0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn quadratic_descends() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![scalar_param(1.0)];
        let mut adam = AdamState::new(cfg, &p);
        for _ in 0..200 {
            let x = p[0].data()[0];
            p[0].grad = Some(vec![2.0 * x]);
            adam.step(&mut p).unwrap();
        }
        let x = p[0].data()[0];
        let reference = reference_adam(1.0, 0.1, 200);
        assert!(reference.abs() < 0.05, "oracle bound {reference}");
        assert!((x - reference).abs() < 1e-12);
        assert!(x.abs() < 0.05);
    }

    #[test]
    fn deterministic_runs() {
        let run = || {
            let mut p = vec![Tensor::new(vec![2], vec![0.3f32, -0.7])
                .unwrap()
                .with_grad()];
            let mut adam = AdamState::new(AdamConfig::default(), &p);
            for i in 0..50 {
                let g: Vec<f32> = p[0]
                    .data()
                    .iter()
                    .map(|w| w * 1.5 + i as f32 * 0.01)
                    .collect();
                p[0].grad = Some(g);
                adam.step(&mut p).unwrap();
            }
            p[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
