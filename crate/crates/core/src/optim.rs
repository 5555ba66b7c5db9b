//! AdamW with decoupled weight decay and bias-corrected moments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Scalar = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Moment buffers keyed by trainable name, plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T: Scalar = f32> {
    pub step: usize,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<T>> {
        self.moments.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Moments<T>)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Drops the buffers of a tensor that stopped being trainable.
    pub fn forget(&mut self, name: &str) -> Option<Moments<T>> {
        self.moments.remove(name)
    }

    pub(crate) fn insert(&mut self, name: String, moments: Moments<T>) {
        self.moments.insert(name, moments);
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: OptimizerState::new(),
        }
    }

    /// Updates every tensor in `params` at learning rate `lr`, then clears its gradient.
    ///
    /// Every tensor must carry a gradient.
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor<T>)>,
    {
        let params: Vec<_> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::contract(format!("trainable `{name}` has no gradient")));
        }
        self.state.step += 1;
        let c = &self.config;
        let t = self.state.step as i32;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (nb1, nb2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let eps = T::from_f64(c.eps);
        let lr_t = T::from_f64(lr);
        let decay = T::one() - T::from_f64(lr * c.weight_decay);
        for (name, p) in params {
            let g = p.take_grad().expect("checked above");
            let mom = self.state.moments.entry(name).or_insert_with(|| Moments {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
            });
            if mom.m.len() != g.len() {
                return Err(Error::contract("moment buffer size changed"));
            }
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = b1 * *m + nb1 * gi;
                *v = b2 * *v + nb2 * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
