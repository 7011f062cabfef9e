//! Augmented agent states and their batched network inputs.

use folio_nn::Tensor;
use serde::{Deserialize, Serialize};

use super::IPM_UNITS;
use crate::error::{CoreError, Result};
use crate::market::{build_price_tensor, MarketData};

/// State `(Y_t, w_{t-1}, x_{t+1}, I_t)` seen by the actor and critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    /// `k2` steps of `3m` features, step-major; each step is
    /// `[close_1..m, high_1..m, low_1..m]` relative to the decision close.
    pub tensor: Vec<f64>,
    /// Weights held entering the decision, cash first.
    pub w_prev: Vec<f64>,
    /// Predicted next close/high/low changes in percent, when the IPM is on.
    pub prediction: Option<Vec<f64>>,
    /// Index close ratio `close_t / close_{t-1}`.
    pub index: f64,
}

/// Shapes and input scaling shared by every state of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub assets: usize,
    pub k2: usize,
    pub ipm: bool,
    /// Price-tensor and index entries enter the networks as
    /// `(v - 1) * feature_scale`, centering ratios that hover around one;
    /// IPM predictions get the same scale after conversion from percent.
    pub feature_scale: f64,
}

impl StateSpec {
    pub fn validate(&self) -> Result<()> {
        if self.assets == 0 || self.k2 == 0 {
            return Err(CoreError::Config("state needs >= 1 asset and k2 >= 1".into()));
        }
        if !(self.feature_scale > 0.0) {
            return Err(CoreError::Config("feature_scale must be positive".into()));
        }
        Ok(())
    }

    /// Features per FE time step.
    pub fn step_dim(&self) -> usize {
        3 * self.assets
    }

    /// Width of the non-sequential inputs joined after the FE.
    pub fn extra_dim(&self) -> usize {
        self.assets + 1 + if self.ipm { 3 * self.assets } else { 0 } + 1
    }

    pub fn action_dim(&self) -> usize {
        self.assets + 1
    }

    /// Builds the state at decision bar `t`. Only bars `<= t` are read.
    pub fn build(
        &self,
        data: &MarketData,
        t: usize,
        w_prev: &[f64],
        prediction: Option<&[f64]>,
    ) -> Result<AugmentedState> {
        if data.num_risky() != self.assets {
            return Err(CoreError::Invalid(format!(
                "data has {} assets, state expects {}",
                data.num_risky(),
                self.assets
            )));
        }
        let pt = build_price_tensor(data, t, self.k2)?;
        let m = self.assets;
        let mut tensor = Vec::with_capacity(self.k2 * 3 * m);
        for j in 0..self.k2 {
            for mat in [&pt.close, &pt.high, &pt.low] {
                tensor.extend((1..=m).map(|i| mat[i][j]));
            }
        }
        let s = AugmentedState {
            tensor,
            w_prev: w_prev.to_vec(),
            prediction: prediction.map(<[f64]>::to_vec),
            index: data.index_ratio(t),
        };
        self.check(&s)?;
        Ok(s)
    }

    pub fn check(&self, s: &AugmentedState) -> Result<()> {
        let m = self.assets;
        if s.tensor.len() != self.k2 * 3 * m || s.w_prev.len() != m + 1 {
            return Err(CoreError::Invalid("state shape does not match the spec".into()));
        }
        match (&s.prediction, self.ipm) {
            (Some(p), true) if p.len() == 3 * m => {}
            (None, false) => {}
            _ => return Err(CoreError::Invalid("prediction presence does not match the IPM flag".into())),
        }
        if !(s.index > 0.0) {
            return Err(CoreError::Invalid("index ratio must be positive".into()));
        }
        Ok(())
    }

    /// Stacks states into per-step `[b, 3m]` matrices and one `[b, extra]`
    /// matrix.
    pub fn batch(&self, states: &[&AugmentedState]) -> Result<StateBatch> {
        if states.is_empty() {
            return Err(CoreError::InsufficientData("empty state batch".into()));
        }
        for s in states {
            self.check(s)?;
        }
        let b = states.len();
        let d = self.step_dim();
        let k = self.feature_scale;
        let steps = (0..self.k2)
            .map(|j| {
                let mut data = Vec::with_capacity(b * d);
                for s in states {
                    data.extend(s.tensor[j * d..(j + 1) * d].iter().map(|v| (v - 1.0) * k));
                }
                Tensor::matrix(b, d, data)
            })
            .collect::<folio_nn::Result<Vec<_>>>()?;
        let mut extra = Vec::with_capacity(b * self.extra_dim());
        for s in states {
            extra.extend_from_slice(&s.w_prev);
            if let Some(p) = &s.prediction {
                // Percent changes onto the same scale as the price features.
                extra.extend(p.iter().map(|v| v / IPM_UNITS * k));
            }
            extra.push((s.index - 1.0) * k);
        }
        Ok(StateBatch {
            steps,
            extra: Tensor::matrix(b, self.extra_dim(), extra)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StateBatch {
    pub steps: Vec<Tensor>,
    pub extra: Tensor,
}

impl StateBatch {
    pub fn len(&self) -> usize {
        self.extra.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
