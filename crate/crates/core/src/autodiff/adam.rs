use crate::autodiff::{Parameter, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter slot.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    t: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        Ok(Self { cfg, t: 0, moments: Vec::new() })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; slots must keep
    /// the same order across calls. Frozen parameters are skipped entirely.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![T::zero(); p.tensor.len()], vec![T::zero(); p.tensor.len()])).collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::InvalidArgument("parameter list changed between Adam steps".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::from_f64(self.cfg.beta1), T::from_f64(self.cfg.beta2));
        let c1 = T::from_f64(1.0 - self.cfg.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.cfg.beta2.powi(t));
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let one = T::one();

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if p.frozen {
                continue;
            }
            if g.len() != p.tensor.len() {
                return Err(Error::shape("adam_step", format!("{}: grad length {} vs {}", p.name, g.len(), p.tensor.len())));
            }
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
