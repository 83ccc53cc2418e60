use crate::error::{Result, TensorError};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

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

/// Adam with bias correction. Moments are kept per parameter, in parameter order.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place from `grads` (same order and shapes).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::invalid(
                "adam_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::invalid("adam_step", "parameter count changed"));
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(TensorError::shape(
                    "adam_step",
                    format!("parameter {} is {:?}, gradient {:?}", i, p.shape(), g.shape()),
                ));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Convenience wrapper stepping every parameter of a store.
    pub fn step_store(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        let mut params: Vec<&mut Tensor<T>> = store.params_mut().iter_mut().map(|p| &mut p.value).collect();
        self.step(&mut params, grads)
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric (higher
/// is better) has failed to improve for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Plateau {
            factor,
            patience,
            min_lr: 0.0,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Feeds one epoch's metric; returns true when the rate was reduced.
    pub fn step(&mut self, metric: f64, lr: &mut f64) -> bool {
        match self.best {
            Some(b) if metric <= b => self.bad_epochs += 1,
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs >= self.patience.max(1) {
            self.bad_epochs = 0;
            let next = (*lr * self.factor).max(self.min_lr);
            let changed = next < *lr;
            *lr = next;
            return changed;
        }
        false
    }
}
