use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!("optimizer: invalid settings {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape());
        AdamW {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Restores saved state. Moment shapes must match the current ones.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Argument("optimizer state length mismatch".into()));
        }
        for (a, b) in m.iter().chain(&v).zip(self.m.iter().chain(&self.v)) {
            if a.shape() != b.shape() {
                return Err(shape_err("optimizer restore", a.shape(), b.shape()));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// `p ← p(1 − lr·wd) − lr · m̂ / (√v̂ + eps)`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Argument(alloc::format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err("optimizer_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = T::lit(c.lr);
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (nb1, nb2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - num_traits::Float::powi(c.beta1, t));
        let bc2 = T::lit(1.0 - num_traits::Float::powi(c.beta2, t));
        let eps = T::lit(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + nb1 * gi;
                *vi = b2 * *vi + nb2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![Tensor::from_fn(&[3], |i| i as f64 - 1.0)];
        let before = p.clone();
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn scalar_hand_trace() {
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut p = vec![Tensor::scalar(1.0f64)];
        let mut opt = AdamW::new(cfg, &p);
        let grads = [0.5, -0.2, 0.3];

        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x = x * (1.0 - 0.1 * 0.01) - 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0].data()[0] - x).abs() < 1e-12);
        }
        // First step of Adam moves by lr regardless of gradient scale.
        let mut q = vec![Tensor::scalar(0.0f64)];
        let mut o = AdamW::new(AdamWConfig { weight_decay: 0.0, ..cfg }, &q);
        o.step(&mut q, &[Tensor::scalar(123.0)]).unwrap();
        assert!((q[0].data()[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_alone_shrinks_geometrically() {
        let cfg = AdamWConfig {
            lr: 0.5,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = vec![Tensor::full(&[2], 2.0f64)];
        let mut opt = AdamW::new(cfg, &p);
        for k in 1..=4 {
            opt.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
            let want = 2.0 * 0.95f64.powi(k);
            assert!(p[0].data().iter().all(|&x| (x - want).abs() < 1e-12));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(opt.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert_eq!(opt.steps(), 0);
    }
}
