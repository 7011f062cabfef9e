//! Adaptive parameter-space exploration noise.

use folio_nn::ParamStore;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamNoise {
    pub sigma: f64,
    /// Multiplicative adaptation factor, `> 1`.
    pub alpha: f64,
    /// Target action distance.
    pub delta: f64,
}

impl Default for ParamNoise {
    fn default() -> Self {
        Self {
            sigma: 0.01,
            alpha: 1.01,
            delta: 0.05,
        }
    }
}

impl ParamNoise {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.alpha > 1.0) || !(self.delta >= 0.0) {
            return Err(CoreError::Config("parameter noise needs sigma > 0, alpha > 1, delta >= 0".into()));
        }
        Ok(())
    }

    /// Grows `sigma` while the induced distance stays within `delta`,
    /// shrinks it otherwise.
    pub fn adapt(&mut self, d: f64) {
        if d <= self.delta {
            self.sigma *= self.alpha;
        } else {
            self.sigma /= self.alpha;
        }
    }
}

/// A copy of `params` with iid `N(0, sigma^2)` added to every entry.
pub fn perturb<R: Rng + ?Sized>(params: &ParamStore, sigma: f64, rng: &mut R) -> Result<ParamStore> {
    if !(sigma > 0.0) {
        return Err(CoreError::Invalid(format!("noise sigma {sigma} must be positive")));
    }
    let mut out = params.clone();
    for id in params.ids() {
        for v in out.value_mut(id).data_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += sigma * e;
        }
    }
    Ok(out)
}

/// Root mean squared difference over every batch row and action entry.
pub fn noise_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(CoreError::Invalid("action batches differ in shape".into()));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            s += (p - q) * (p - q);
            n += 1;
        }
    }
    Ok((s / n as f64).sqrt())
}
