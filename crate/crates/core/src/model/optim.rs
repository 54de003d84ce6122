use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Learning rate `lr0 · factor^⌊epoch / every⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub lr0: f64,
    pub factor: f64,
    pub every: usize,
}

impl StepDecay {
    pub fn new(lr0: f64, factor: f64, every: usize) -> Result<Self> {
        if !(lr0 >= 0.0 && lr0.is_finite()) || !(factor > 0.0) || every == 0 {
            return Err(Error::Config(format!(
                "bad schedule lr0={lr0} factor={factor} every={every}"
            )));
        }
        Ok(Self { lr0, factor, every })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.factor.powi((epoch / self.every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = |_| params.ids().map(|id| vec![T::zero(); params.get(id).numel()]).collect();
        Self {
            cfg,
            m: zeros(()),
            v: zeros(()),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the stored gradients, then clears them.
    /// Parameters without a gradient are left unchanged.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one, eps) = (T::one(), T::lit(eps));
        let (c1, c2, lr) = (T::lit(c1), T::lit(c2), T::lit(lr));
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            let Some(g) = t.take_grad() else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((x, gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * *gi;
                *vi = b2 * *vi + (one - b2) * *gi * *gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_decays_on_boundaries() {
        let s = StepDecay::new(2e-5, 0.25, 80).unwrap();
        assert_eq!(s.lr(79), 2e-5);
        assert_eq!(s.lr(80), 2e-5 * 0.25);
        assert!((s.lr(160) - 2e-5 * 0.0625).abs() < 1e-20);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("x", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        p.get_mut(id).accumulate_grad(&[3.0, -0.5]).unwrap();
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, 0.1);
        let d = p.get(id).data();
        assert!((d[0] - 0.9).abs() < 1e-7 && (d[1] + 0.9).abs() < 1e-7);
        assert!(p.get(id).grad().is_none());
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = ParamStore::<f64>::new();
        let id = p.add("x", Tensor::new(&[1], vec![0.25]).unwrap());
        p.get_mut(id).accumulate_grad(&[1.0]).unwrap();
        Adam::new(&p, AdamConfig::default()).step(&mut p, 0.0);
        assert_eq!(p.get(id).data(), &[0.25]);
    }
}
