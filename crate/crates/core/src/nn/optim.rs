use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// WGAN-GP reference settings.
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != g.len() || m.len() != p.len() {
                return Err(Error::shape(format!("param {:?} vs grad {:?}", p.shape, g.shape)));
            }
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(x)]
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = one(1.5);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..10 {
            opt.step(&mut p, &one(0.0)).unwrap();
        }
        assert_eq!(p[0].item(), 1.5);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [3.0, -0.02] {
            let mut p = one(0.0);
            let cfg = AdamConfig::default();
            let mut opt = Adam::new(cfg, &p);
            opt.step(&mut p, &one(g)).unwrap();
            // m̂ = g, v̂ = g², step = lr·g/(|g| + eps)
            let want = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0].item() - want).abs() < 1e-15);
            assert!((p[0].item().abs() - cfg.lr).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = one(0.0);
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg, &p);
        let mut prev = 0.0;
        let mut step = 0.0;
        for _ in 0..500 {
            opt.step(&mut p, &one(0.7)).unwrap();
            step = prev - p[0].item();
            prev = p[0].item();
        }
        assert!((step - cfg.lr).abs() < 1e-10);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut p = one(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        assert!(opt.step(&mut p, &[]).is_err());
    }
}
