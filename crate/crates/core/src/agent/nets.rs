//! Actor and critic networks: a bidirectional LSTM feature extractor over
//! the price tensor, then a leaky-ReLU dense stack with dropout.

use folio_nn::{BiLstm, Dense, Dropout, Graph, NodeId, ParamStore, Tensor};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::state::{StateBatch, StateSpec};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Hidden sizes of the stacked bidirectional LSTMs.
    pub fe_hidden: Vec<usize>,
    pub fa_hidden: Vec<usize>,
    pub leaky_slope: f64,
    /// Probability of dropping an FA unit in training mode.
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            fe_hidden: vec![20, 8],
            fa_hidden: vec![256, 128, 64, 32],
            leaky_slope: 0.01,
            dropout: 0.5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fe_hidden.is_empty() || self.fe_hidden.contains(&0) || self.fa_hidden.contains(&0) {
            return Err(CoreError::Config("network layer sizes must be positive and FE non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Dropout randomness in training mode; `None` evaluates deterministically.
pub type DropoutRng<'a> = Option<&'a mut dyn RngCore>;

#[derive(Debug, Clone)]
struct FeatureExtractor {
    layers: Vec<BiLstm>,
}

impl FeatureExtractor {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut width = input;
        let mut layers = Vec::with_capacity(hidden.len());
        for (k, &h) in hidden.iter().enumerate() {
            layers.push(BiLstm::new(store, &format!("{name}.fe{k}"), width, h, rng)?);
            width = 2 * h;
        }
        Ok(Self { layers })
    }

    fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, BiLstm::out_dim)
    }

    /// Final forward state joined with the final backward state, `[b, 2H]`.
    fn run(&self, g: &mut Graph, store: &ParamStore, steps: &[Tensor]) -> Result<NodeId> {
        let mut xs = steps.iter().map(|s| g.constant(s.clone())).collect::<folio_nn::Result<Vec<_>>>()?;
        for layer in &self.layers {
            xs = layer.run(g, store, &xs)?;
        }
        let h = self.out_dim() / 2;
        let fwd = g.slice_cols(*xs.last().expect("k2 >= 1"), 0, h)?;
        let bwd = g.slice_cols(xs[0], h, 2 * h)?;
        Ok(g.concat_cols(&[fwd, bwd])?)
    }
}

#[derive(Debug, Clone)]
struct DenseStack {
    layers: Vec<Dense>,
    slope: f64,
    dropout: Dropout,
}

impl DenseStack {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let mut width = input;
        let mut layers = Vec::with_capacity(cfg.fa_hidden.len());
        for (k, &h) in cfg.fa_hidden.iter().enumerate() {
            layers.push(Dense::new(store, &format!("{name}.fa{k}"), width, h, rng)?);
            width = h;
        }
        Ok(Self {
            layers,
            slope: cfg.leaky_slope,
            dropout: Dropout::new(1.0 - cfg.dropout)?,
        })
    }

    fn out_dim(&self, input: usize) -> usize {
        self.layers.last().map_or(input, |d| d.out_dim)
    }

    fn run(&self, g: &mut Graph, store: &ParamStore, mut x: NodeId, rng: &mut DropoutRng<'_>) -> Result<NodeId> {
        for layer in &self.layers {
            x = layer.forward(g, store, x)?;
            x = g.leaky_relu(x, self.slope)?;
            if let Some(r) = rng.as_deref_mut() {
                x = self.dropout.forward(g, x, true, r)?;
            }
        }
        Ok(x)
    }
}

/// Policy network with a softmax head over cash and the risky assets.
#[derive(Debug, Clone)]
pub struct ActorNet {
    fe: FeatureExtractor,
    fa: DenseStack,
    head: Dense,
}

impl ActorNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: &StateSpec, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let fe = FeatureExtractor::new(store, "actor", spec.step_dim(), &cfg.fe_hidden, rng)?;
        let input = fe.out_dim() + spec.extra_dim();
        let fa = DenseStack::new(store, "actor", input, cfg, rng)?;
        let head = Dense::new(store, "actor.head", fa.out_dim(input), spec.action_dim(), rng)?;
        Ok(Self { fe, fa, head })
    }

    /// Action probabilities `[b, m + 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &StateBatch, mut rng: DropoutRng<'_>) -> Result<NodeId> {
        let f = self.fe.run(g, store, &batch.steps)?;
        let extra = g.constant(batch.extra.clone())?;
        let x = g.concat_cols(&[f, extra])?;
        let x = self.fa.run(g, store, x, &mut rng)?;
        let logits = self.head.forward(g, store, x)?;
        Ok(g.softmax(logits)?)
    }

    /// Evaluation-mode actions, one row per state.
    pub fn act(&self, store: &ParamStore, batch: &StateBatch) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let a = self.forward(&mut g, store, batch, None)?;
        let t = g.value(a);
        if !t.is_finite() {
            return Err(CoreError::NonFinite("actor output"));
        }
        Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
    }
}

/// Action-value network; the action joins the FE output and state extras at
/// the first dense layer.
#[derive(Debug, Clone)]
pub struct CriticNet {
    fe: FeatureExtractor,
    fa: DenseStack,
    head: Dense,
}

impl CriticNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: &StateSpec, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let fe = FeatureExtractor::new(store, "critic", spec.step_dim(), &cfg.fe_hidden, rng)?;
        let input = fe.out_dim() + spec.extra_dim() + spec.action_dim();
        let fa = DenseStack::new(store, "critic", input, cfg, rng)?;
        let head = Dense::new(store, "critic.head", fa.out_dim(input), 1, rng)?;
        Ok(Self { fe, fa, head })
    }

    /// `Q(s, a)` as `[b, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &StateBatch,
        action: NodeId,
        mut rng: DropoutRng<'_>,
    ) -> Result<NodeId> {
        let f = self.fe.run(g, store, &batch.steps)?;
        let extra = g.constant(batch.extra.clone())?;
        let x = g.concat_cols(&[f, extra, action])?;
        let x = self.fa.run(g, store, x, &mut rng)?;
        Ok(self.head.forward(g, store, x)?)
    }

    pub fn q_values(&self, store: &ParamStore, batch: &StateBatch, actions: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let a = g.constant(actions.clone())?;
        let q = self.forward(&mut g, store, batch, a, None)?;
        Ok(g.value(q).data().to_vec())
    }
}
