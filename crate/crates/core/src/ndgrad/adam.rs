use crate::error::{Error, Result};

use super::tensor::{Real, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor2<T>>,
    pub v: Vec<Tensor2<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor2<T>]) -> Self {
        let zeros = |p: &Tensor2<T>| Tensor2::zeros(p.rows(), p.cols());
        AdamState {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// One bias-corrected Adam update over every parameter, then clears the
    /// gradients.
    pub fn step(&mut self, params: &mut [Tensor2<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam state tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(Error::dim("adam_step", p.shape(), self.m[i].shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);

        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.take_grad().expect("checked above");
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + one_b1 * g[k];
                v[k] = b2 * v[k] + one_b2 * g[k] * g[k];
                let v_hat = v[k] * inv_bc2;
                *x -= step_size * m[k] / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor2<f64> {
        Tensor2::scalar(v).with_grad()
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = vec![scalar_param(1.5)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        p[0].accumulate_grad(&[0.0]);
        st.step(&mut p).unwrap();
        assert_eq!(p[0].item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m1 = 0.1, v1 = 0.001; bias corrected both give 1 -> step = lr * 1/(1+eps)
        let mut p = vec![scalar_param(0.0)];
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &p);
        p[0].accumulate_grad(&[1.0]);
        st.step(&mut p).unwrap();
        assert!((p[0].item() + 0.1).abs() < 1e-6);
        assert_eq!(st.step, 1);
        assert!(p[0].grad().is_none());
        p[0].accumulate_grad(&[1.0]);
        st.step(&mut p).unwrap();
        assert_eq!(st.step, 2);
        assert!((p[0].item() + 0.2).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = vec![scalar_param(0.0)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(matches!(st.step(&mut p), Err(Error::Contract(_))));
        assert_eq!(st.step, 0);
    }
}
