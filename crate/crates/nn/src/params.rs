//! Named parameter sets with gradient accumulators and the JSON checkpoint
//! format.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Gradients, Graph};
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An ordered set of named parameters.
///
/// Every store carries a process-unique id so a graph mixing parameters from
/// several stores (actor and critic, say) routes gradients to the right one.
/// Cloning a store allocates a new id.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    lookup: BTreeMap<String, usize>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            names: self.names.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
            lookup: self.lookup.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            lookup: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let idx = self.values.len();
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.lookup.insert(name.clone(), idx);
        self.names.push(name);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Result<ParamId> {
        self.lookup
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Simultaneous mutable access to values and read access to gradients.
    pub fn values_and_grads_mut(&mut self) -> (&mut [Tensor], &[Tensor]) {
        (&mut self.values, &self.grads)
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Adds the gradients of every parameter node in `graph` that belongs to
    /// this store. Returns the number of parameter nodes that received a
    /// gradient.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) -> usize {
        let mut touched = 0;
        for (node, store, param) in graph.param_nodes() {
            if store != self.id {
                continue;
            }
            if let Some(g) = grads.get(node) {
                self.grads[param.0].add_assign(g);
                touched += 1;
            }
        }
        touched
    }

    /// Copies values from another store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// `self <- tau * online + (1 - tau) * self`, elementwise. Written as a
    /// step toward `online` so coordinates that already agree stay bit-exact.
    pub fn soft_update_from(&mut self, online: &ParamStore, tau: f64) -> Result<()> {
        self.check_layout(online)?;
        for (dst, src) in self.values.iter_mut().zip(&online.values) {
            for (t, &o) in dst.data_mut().iter_mut().zip(src.data()) {
                *t = if tau == 1.0 { o } else { *t + tau * (o - *t) };
            }
        }
        Ok(())
    }

    fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(NnError::Checkpoint("parameter names differ".into()));
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "param layout",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, v)| ParamRecord {
                    name: n.clone(),
                    shape: v.shape().to_vec(),
                    values: v.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a checkpoint. Every parameter in the store must
    /// be present with a matching shape.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let by_name: BTreeMap<&str, &ParamRecord> =
            ck.params.iter().map(|r| (r.name.as_str(), r)).collect();
        for (i, name) in self.names.iter().enumerate() {
            let rec = by_name
                .get(name.as_str())
                .ok_or_else(|| NnError::Checkpoint(format!("missing parameter `{name}`")))?;
            if rec.shape != self.values[i].shape() {
                return Err(NnError::ShapeMismatch {
                    op: "load_checkpoint",
                    left: self.values[i].shape().to_vec(),
                    right: rec.shape.clone(),
                });
            }
            self.values[i] = Tensor::new(rec.shape.clone(), rec.values.clone())?;
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut store = Self::new();
        for rec in &ck.params {
            store.add(rec.name.clone(), Tensor::new(rec.shape.clone(), rec.values.clone())?)?;
        }
        Ok(store)
    }
}

/// One serialized parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Flat list of named parameters. Serialized as JSON; `serde_json` writes
/// floats in shortest round-trip form so values survive a round trip exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    /// Prefixes every parameter name, for bundling several stores in one file.
    pub fn prefixed(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            params: self
                .params
                .iter()
                .map(|r| ParamRecord {
                    name: format!("{prefix}{}", r.name),
                    ..r.clone()
                })
                .collect(),
        }
    }

    /// Records whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            params: self
                .params
                .iter()
                .filter_map(|r| {
                    r.name.strip_prefix(prefix).map(|n| ParamRecord {
                        name: n.to_string(),
                        ..r.clone()
                    })
                })
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Checkpoint) {
        self.params.extend(other.params);
    }
}
