//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

use super::config::LrSchedule;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn update(&mut self, params: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = &g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g2 * (1.0 - self.beta2))?)?,
                None => (g2 * (1.0 - self.beta2))?,
            };
            let (m, v) = (m.detach(), v.detach());
            let step = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let theta = var.as_detached_tensor();
            let next = ((&theta * (1.0 - lr * self.weight_decay))? - (step * lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors keyed `adam.m.<param>` and `adam.v.<param>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let m = self.m.iter().map(|(k, t)| (format!("adam.m.{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("adam.v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                self.v.insert(name.to_string(), t.clone());
            }
        }
        if self.m.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer moments are incomplete".into()));
        }
        self.step = step;
        Ok(())
    }
}

/// Learning rate at `step` out of `total`.
pub fn scheduled_lr(base: f64, schedule: LrSchedule, step: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Poly => {
            let frac = step as f64 / total.max(1) as f64;
            base * (1.0 - frac.min(1.0)).powf(0.9)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    /// Scalar reference implementation.
    fn reference(theta0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th = th * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        }
        th
    }

    #[test]
    fn matches_scalar_reference() {
        // loss = sum(c * x^2) so grad = 2 c x, recomputed each step
        let dev = Device::Cpu;
        let var = Var::from_tensor(&Tensor::new(&[1.5f64, -0.3], &dev).unwrap()).unwrap();
        let c = Tensor::new(&[0.7f64, 2.0], &dev).unwrap();
        let params = vec![("x".to_string(), var.clone())];
        let mut opt = AdamW::new(0.1);
        let mut expected_grads: Vec<Vec<f64>> = vec![vec![], vec![]];
        let mut scalar = [1.5f64, -0.3];
        for _ in 0..5 {
            let loss = (var.as_tensor().sqr().unwrap() * &c).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.update(&params, &grads, 0.05).unwrap();
            // replay on the scalar oracle with its own trajectory
            for j in 0..2 {
                let cj = [0.7, 2.0][j];
                expected_grads[j].push(2.0 * cj * scalar[j]);
                scalar[j] = reference([1.5, -0.3][j], &expected_grads[j], 0.05, 0.1);
            }
        }
        let got = var.as_tensor().to_vec1::<f64>().unwrap();
        for j in 0..2 {
            assert!((got[j] - scalar[j]).abs() < 1e-12, "{got:?} vs {scalar:?}");
        }
        assert_eq!(opt.step, 5);
        assert_eq!(opt.state().len(), 2);
    }

    #[test]
    fn params_without_grad_are_untouched() {
        let dev = Device::Cpu;
        let a = Var::from_tensor(&Tensor::new(&[1.0f64], &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::new(&[1.0f64], &dev).unwrap()).unwrap();
        let grads = a.as_tensor().sum_all().unwrap().backward().unwrap();
        let mut opt = AdamW::new(0.1);
        opt.update(&[("a".into(), a.clone()), ("b".into(), b.clone())], &grads, 0.1).unwrap();
        assert_eq!(b.as_tensor().to_vec1::<f64>().unwrap(), vec![1.0]);
        assert_ne!(a.as_tensor().to_vec1::<f64>().unwrap(), vec![1.0]);
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(scheduled_lr(1.0, LrSchedule::Constant, 50, 100), 1.0);
        assert_eq!(scheduled_lr(1.0, LrSchedule::Poly, 0, 100), 1.0);
        assert!((scheduled_lr(1.0, LrSchedule::Poly, 50, 100) - 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(scheduled_lr(1.0, LrSchedule::Poly, 100, 100), 0.0);
    }
}
