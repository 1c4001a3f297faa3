//! Adam over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(unit(self.beta1) && unit(self.beta2)) {
            return Err(Error::validation(format!(
                "adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::validation("adam epsilon must be > 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        lr: f64,
        params: &mut ParamStore<T>,
        grads: &ParamStore<T>,
    ) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2): (T, T) = (lit(cfg.beta1), lit(cfg.beta2));
        let (c1, c2): (T, T) = (T::one() - b1, T::one() - b2);
        let step: T = lit(lr / (1.0 - cfg.beta1.powi(t)));
        let corr2: T = lit(1.0 / (1.0 - cfg.beta2.powi(t)));
        let eps: T = lit(cfg.epsilon);
        for (key, p) in params.iter_mut() {
            let g = grads.get(key);
            let m = self.m.get_mut(key);
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + c1 * gi;
            }
            let v = self.v.get_mut(key);
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + c2 * gi * gi;
            }
            let (m, v) = (self.m.get(key), self.v.get(key));
            for ((w, &mi), &vi) in p.data.iter_mut().zip(m).zip(v) {
                *w -= step * mi / ((vi * corr2).sqrt() + eps);
            }
        }
    }
}
