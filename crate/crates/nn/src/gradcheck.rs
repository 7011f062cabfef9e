//! Central finite-difference checks of [`Graph::backward`].

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Relative error with a small absolute floor on the denominator so that
/// gradients that are zero up to rounding do not register as failures.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter name (or input index) and flat offset of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheck {
    fn record(&mut self, what: impl FnOnce() -> String, offset: usize, err: f64) {
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some((what(), offset));
        }
    }
}

fn scalar(g: &Graph, node: NodeId) -> f64 {
    g.value(node).data()[0]
}

/// Compares backward gradients of every parameter in `store` with central
/// differences of the scalar built by `f`.
pub fn check_params<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    store.accumulate(&g, &grads);
    let analytic: Vec<Tensor> = store.grads().to_vec();
    store.zero_grad();

    let mut out = GradCheck::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let mut gp = Graph::new();
            let lp = f(&mut gp, store)?;
            let fp = scalar(&gp, lp);
            store.value_mut(id).data_mut()[k] = orig - eps;
            let mut gm = Graph::new();
            let lm = f(&mut gm, store)?;
            let fm = scalar(&gm, lm);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = rel_err(analytic[id.index()].data()[k], numeric);
            out.record(|| store.name(id).to_string(), k, err);
        }
    }
    Ok(out)
}

/// Same as [`check_params`] but differentiates with respect to input tensors
/// placed on the graph with [`Graph::input`].
pub fn check_inputs<F>(inputs: &mut [Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |inputs: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids = inputs
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &ids)?;
        Ok((g, ids, loss))
    };
    let (g, ids, loss) = eval(inputs)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(&g, id)).collect();

    let mut out = GradCheck::default();
    for i in 0..inputs.len() {
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            inputs[i].data_mut()[k] = orig + eps;
            let (gp, _, lp) = eval(inputs)?;
            inputs[i].data_mut()[k] = orig - eps;
            let (gm, _, lm) = eval(inputs)?;
            inputs[i].data_mut()[k] = orig;
            let numeric = (scalar(&gp, lp) - scalar(&gm, lm)) / (2.0 * eps);
            let err = rel_err(analytic[i].data()[k], numeric);
            out.record(|| format!("input{i}"), k, err);
        }
    }
    Ok(out)
}
