//! Dense, LSTM, bidirectional LSTM and dropout layers built on [`Graph`].
//!
//! Layers own only [`ParamId`]s; values live in a [`ParamStore`] so that
//! online, target and perturbed copies of a network can share one layer
//! description.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
    Softmax,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Softmax => g.softmax(x),
        }
    }
}

/// Fully connected layer `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, in_dim, out_dim, bound))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, out_dim]))?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// LSTM cell; gate order input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Parameter nodes of an [`LstmCell`] placed on one graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
    hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bx = 1.0 / (in_dim.max(1) as f64).sqrt();
        let bh = 1.0 / (hidden.max(1) as f64).sqrt();
        let wx = store.add(format!("{name}.wx"), uniform(rng, in_dim, 4 * hidden, bx))?;
        let wh = store.add(format!("{name}.wh"), uniform(rng, hidden, 4 * hidden, bh))?;
        let mut bias = Tensor::zeros(&[1, 4 * hidden]);
        for j in hidden..2 * hidden {
            bias.data_mut()[j] = 1.0;
        }
        let b = store.add(format!("{name}.b"), bias)?;
        Ok(Self {
            wx,
            wh,
            b,
            in_dim,
            hidden,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundLstm> {
        Ok(BoundLstm {
            wx: g.param(store, self.wx)?,
            wh: g.param(store, self.wh)?,
            b: g.param(store, self.b)?,
            hidden: self.hidden,
        })
    }

    /// Zero initial `(h, c)` for a batch.
    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> Result<(NodeId, NodeId)> {
        let h = g.constant(Tensor::zeros(&[batch, self.hidden]))?;
        Ok((h, h))
    }

    /// Runs the cell over `xs` (each `[batch, in]`) from a zero state and
    /// returns the hidden state after every step.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, xs: &[NodeId]) -> Result<Vec<NodeId>> {
        let Some(&first) = xs.first() else {
            return Ok(Vec::new());
        };
        let bound = self.bind(g, store)?;
        let (mut h, mut c) = self.zero_state(g, g.value(first).rows())?;
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            (h, c) = bound.step(g, x, h, c)?;
            out.push(h);
        }
        Ok(out)
    }
}

impl BoundLstm {
    /// One step; returns the new `(h, c)`.
    pub fn step(&self, g: &mut Graph, x: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        let hc = g.lstm_cell(x, h, c, self.wx, self.wh, self.b)?;
        let h2 = g.slice_cols(hc, 0, self.hidden)?;
        let c2 = g.slice_cols(hc, self.hidden, 2 * self.hidden)?;
        Ok((h2, c2))
    }
}

/// Forward and backward LSTMs whose hidden states are concatenated per time
/// step, giving `[batch, 2H]` outputs.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fwd: LstmCell::new(store, &format!("{name}.fwd"), in_dim, hidden, rng)?,
            bwd: LstmCell::new(store, &format!("{name}.bwd"), in_dim, hidden, rng)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn run(&self, g: &mut Graph, store: &ParamStore, xs: &[NodeId]) -> Result<Vec<NodeId>> {
        let f = self.fwd.run(g, store, xs)?;
        let rev: Vec<NodeId> = xs.iter().rev().copied().collect();
        let mut b = self.bwd.run(g, store, &rev)?;
        b.reverse();
        f.iter()
            .zip(&b)
            .map(|(&hf, &hb)| g.concat_cols(&[hf, hb]))
            .collect()
    }
}

/// Inverted dropout: kept units are scaled by `1/keep` in training mode.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub keep: f64,
}

impl Dropout {
    pub fn new(keep: f64) -> Result<Self> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(NnError::Config(format!("dropout keep probability {keep} not in (0, 1]")));
        }
        Ok(Self { keep })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: NodeId,
        train: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !train || self.keep >= 1.0 {
            return Ok(x);
        }
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let scale = 1.0 / self.keep;
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < self.keep { scale } else { 0.0 })
            .collect();
        g.mul_const(x, Tensor::new(shape, mask)?)
    }
}

/// Declarative layer description used to validate stacks before building.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    LstmCell { in_dim: usize, hidden: usize },
    BidirectionalLstm { in_dim: usize, hidden: usize },
    Dropout { keep: f64 },
    Activation(Activation),
}

impl LayerSpec {
    fn io(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => Some((in_dim, out_dim)),
            LayerSpec::LstmCell { in_dim, hidden } => Some((in_dim, hidden)),
            LayerSpec::BidirectionalLstm { in_dim, hidden } => Some((in_dim, 2 * hidden)),
            LayerSpec::Dropout { .. } | LayerSpec::Activation(_) => None,
        }
    }

    /// Checks that adjacent layers agree on widths; returns the output width.
    pub fn validate_stack(input: usize, stack: &[LayerSpec]) -> Result<usize> {
        let mut width = input;
        for (i, layer) in stack.iter().enumerate() {
            if let LayerSpec::Dropout { keep } = layer {
                Dropout::new(*keep)?;
            }
            if let Some((inp, out)) = layer.io() {
                if inp != width {
                    return Err(NnError::Config(format!(
                        "layer {i} expects width {inp}, previous layer produces {width}"
                    )));
                }
                if out == 0 {
                    return Err(NnError::Config(format!("layer {i} has zero width")));
                }
                width = out;
            }
        }
        Ok(width)
    }
}
