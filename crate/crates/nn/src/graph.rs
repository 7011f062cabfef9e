//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is a valid
//! topological order, so [`Graph::backward`] simply walks the tape in
//! reverse. Values are computed eagerly.

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { store: u64, param: ParamId },
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { a: NodeId, row: NodeId },
    AddCol { a: NodeId, col: NodeId },
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Softmax(NodeId),
    MulConst(NodeId, Tensor),
    ConcatCols(Vec<NodeId>),
    SliceCols { a: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    SliceRows { a: NodeId, start: usize },
    Sum(NodeId),
    Mean(NodeId),
    RowSums(NodeId),
    Lstm(Box<LstmCache>),
    Mse { pred: NodeId, target: Tensor },
    BinaryLogLoss { pred: NodeId, target: Tensor },
}

#[derive(Debug, Clone)]
struct LstmCache {
    x: NodeId,
    h: NodeId,
    c: NodeId,
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
    /// Activated gates `[i | f | g | o]`, shape `[batch, 4H]`.
    gates: Tensor,
    /// `tanh(c')`, shape `[batch, H]`.
    tanh_c: Tensor,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    /// False when no differentiable leaf or parameter feeds this node; the
    /// backward pass skips such nodes.
    needs_grad: bool,
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(NodeId)) {
        match self {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::AddRow { a, row: b } | Op::AddCol { a, col: b } => {
                f(*a);
                f(*b);
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::MulConst(a, _)
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSums(a)
            | Op::Mse { pred: a, .. }
            | Op::BinaryLogLoss { pred: a, .. } => f(*a),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().copied().for_each(f),
            Op::Lstm(c) => [c.x, c.h, c.c, c.wx, c.wh, c.b].into_iter().for_each(f),
        }
    }
}

/// Probabilities entering log-losses are clamped into this interval.
pub const PROB_CLAMP: f64 = 1e-7;

/// Gradients for every node reached by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `node`, zeros when the loss does not depend
    /// on it.
    pub fn wrt(&self, graph: &Graph, node: NodeId) -> Tensor {
        self.get(node)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(node).shape()))
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Stores whose parameters enter this graph as constants.
    frozen: Vec<u64>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `exp(x)` for `x <= 0` by range reduction and a degree 13 Taylor
/// polynomial. Within a few ulp of libm and branch-free, so gate loops
/// vectorize. Inputs below -708 return `exp(-708)` instead of underflowing.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5 * 2^52 rounds to an integer held in the low mantissa bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let x = x.max(-708.0);
    let kf = x * std::f64::consts::LOG2_E + SHIFTER;
    let k = kf - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for d in [
        479_001_600.0,
        39_916_800.0,
        3_628_800.0,
        362_880.0,
        40_320.0,
        5040.0,
        720.0,
        120.0,
        24.0,
        6.0,
        2.0,
        1.0,
        1.0,
    ] {
        p = p * r + 1.0 / d;
    }
    // k is in [-1022, 0]; its two's complement sits in the low bits of kf.
    let biased = (kf.to_bits() as i64).wrapping_add(1023 - (3 << 51)) as u64;
    p * f64::from_bits(biased << 52)
}

#[inline(always)]
fn sigmoid(v: f64) -> f64 {
    let e = exp_nonpos(-v.abs());
    let s = 1.0 / (1.0 + e);
    if v >= 0.0 { s } else { e * s }
}

/// `tanh` through one `exp`. Near zero `1 - e` cancels, so small inputs use
/// the odd Taylor series instead.
#[inline(always)]
fn tanh(v: f64) -> f64 {
    let a = v.abs();
    let e = exp_nonpos(-2.0 * a);
    let big = (1.0 - e) / (1.0 + e);
    let a2 = a * a;
    let small = a * (1.0 + a2 * (-1.0 / 3.0 + a2 * (2.0 / 15.0 + a2 * (-17.0 / 315.0 + a2 * (62.0 / 2835.0)))));
    (if a < 0.03 { small } else { big }).copysign(v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        let mut needs_grad = false;
        op.for_each_input(|i| needs_grad |= self.nodes[i.0].needs_grad);
        self.push_with(value, op, name, needs_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, name: &'static str, needs_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub(crate) fn param_nodes(&self) -> impl Iterator<Item = (NodeId, u64, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param { store, param } => Some((NodeId(i), store, param)),
            _ => None,
        })
    }

    /// Constant or input tensor. Gradients are still computed for it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_with(value, Op::Leaf, "input", true)
    }

    /// Tensor that receives no gradient; work feeding only constants is
    /// skipped in the backward pass.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_with(value, Op::Leaf, "constant", false)
    }

    /// Places later parameters of `store` on the tape as constants, e.g. a
    /// critic or discriminator that only passes gradients through.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.push(store.id());
    }

    /// Brings a parameter onto the tape. Call once per forward pass and reuse
    /// the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        let trainable = !self.frozen.contains(&store.id());
        self.push_with(
            store.value(id).clone(),
            Op::Param {
                store: store.id(),
                param: id,
            },
            "param",
            trainable,
        )
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = if trans_b {
            (tb.cols(), tb.rows())
        } else {
            (tb.rows(), tb.cols())
        };
        if k != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, ta.data(), false, tb.data(), trans_b, 0.0, &mut out);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, trans_b }, "matmul")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(name, ta, tb));
        }
        let v = ta.zip_map(tb, f);
        self.push(v, op, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `[r, c] + [1, c]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let c = ta.cols();
        let mut v = ta.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += tr.data()[i % c];
        }
        self.push(v, Op::AddRow { a, row }, "add_row")
    }

    /// `[r, c] + [r, 1]` broadcast over columns.
    pub fn add_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("add_col", ta, tc));
        }
        let c = ta.cols();
        let mut v = ta.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += tc.data()[i / c];
        }
        self.push(v, Op::AddCol { a, col }, "add_col")
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(tanh);
        self.push(v, Op::Tanh(a), "tanh")
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), "log")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), "square")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let c = t.cols();
        let mut v = t.clone();
        for row in v.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(v, Op::Softmax(a), "softmax")
    }

    /// Elementwise product with a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, a: NodeId, k: Tensor) -> Result<NodeId> {
        let ta = self.value(a);
        if !ta.same_shape(&k) {
            return Err(shape_err("mul_const", ta, &k));
        }
        let v = ta.zip_map(&k, |x, y| x * y);
        self.push(v, Op::MulConst(a, k), "mul_const")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(t.row_slice(r));
            }
            off += w;
        }
        self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        if end > t.cols() || start > end {
            return Err(NnError::ShapeMismatch {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let (rows, w) = (t.rows(), end - start);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        self.push(
            Tensor::matrix(rows, w, out)?,
            Op::SliceCols { a, start },
            "slice_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        if end > t.rows() || start > end {
            return Err(NnError::ShapeMismatch {
                op: "slice_rows",
                left: t.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let c = t.cols();
        let out = t.data()[start * c..end * c].to_vec();
        self.push(
            Tensor::matrix(end - start, c, out)?,
            Op::SliceRows { a, start },
            "slice_rows",
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Per-row sums, `[r, c] -> [r, 1]`.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let rows = t.rows();
        let out: Vec<f64> = (0..rows).map(|r| t.row_slice(r).iter().sum()).collect();
        self.push(Tensor::matrix(rows, 1, out)?, Op::RowSums(a), "row_sums")
    }

    /// Fused LSTM cell. Gate order is input, forget, cell, output.
    ///
    /// Shapes: `x [B, I]`, `h, c [B, H]`, `wx [I, 4H]`, `wh [H, 4H]`,
    /// `b [1, 4H]`. The output node is `[B, 2H]` holding `[h' | c']`.
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        wx: NodeId,
        wh: NodeId,
        b: NodeId,
    ) -> Result<NodeId> {
        let (tx, th, tc) = (self.value(x), self.value(h), self.value(c));
        let (twx, twh, tb) = (self.value(wx), self.value(wh), self.value(b));
        let batch = tx.rows();
        let hid = th.cols();
        let g4 = 4 * hid;
        if twx.rows() != tx.cols() || twx.cols() != g4 {
            return Err(shape_err("lstm_cell", tx, twx));
        }
        if twh.rows() != hid || twh.cols() != g4 || th.rows() != batch {
            return Err(shape_err("lstm_cell", th, twh));
        }
        if !tc.same_shape(th) || tb.cols() != g4 || tb.rows() != 1 {
            return Err(shape_err("lstm_cell", tc, tb));
        }
        let mut pre = vec![0.0; batch * g4];
        for row in pre.chunks_mut(g4) {
            row.copy_from_slice(tb.data());
        }
        gemm(batch, tx.cols(), g4, 1.0, tx.data(), false, twx.data(), false, 1.0, &mut pre);
        gemm(batch, hid, g4, 1.0, th.data(), false, twh.data(), false, 1.0, &mut pre);
        let mut out = Vec::with_capacity(batch * 2 * hid);
        let mut tanh_c = Vec::with_capacity(batch * hid);
        for r in 0..batch {
            let gates = &mut pre[r * g4..(r + 1) * g4];
            gates[..2 * hid].iter_mut().for_each(|v| *v = sigmoid(*v));
            gates[2 * hid..3 * hid].iter_mut().for_each(|v| *v = tanh(*v));
            gates[3 * hid..].iter_mut().for_each(|v| *v = sigmoid(*v));
            let c_prev = &tc.data()[r * hid..(r + 1) * hid];
            let c_new: Vec<f64> = (0..hid).map(|j| gates[hid + j] * c_prev[j] + gates[j] * gates[2 * hid + j]).collect();
            let row_start = tanh_c.len();
            tanh_c.extend(c_new.iter().map(|v| tanh(*v)));
            out.extend((0..hid).map(|j| gates[3 * hid + j] * tanh_c[row_start + j]));
            out.extend_from_slice(&c_new);
        }
        let cache = LstmCache {
            x,
            h,
            c,
            wx,
            wh,
            b,
            gates: Tensor::matrix(batch, g4, pre)?,
            tanh_c: Tensor::matrix(batch, hid, tanh_c)?,
        };
        self.push(
            Tensor::matrix(batch, 2 * hid, out)?,
            Op::Lstm(Box::new(cache)),
            "lstm_cell",
        )
    }

    /// Mean squared error against a constant target, as a scalar node.
    pub fn mse(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        let tp = self.value(pred);
        if !tp.same_shape(&target) {
            return Err(shape_err("mse", tp, &target));
        }
        let (loss, _) = crate::losses::mse(tp.data(), target.data())?;
        self.push(Tensor::scalar(loss), Op::Mse { pred, target }, "mse")
    }

    /// Mean binary log-loss against a constant target, as a scalar node.
    /// Predictions are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn binary_log_loss(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        let tp = self.value(pred);
        if !tp.same_shape(&target) {
            return Err(shape_err("binary_log_loss", tp, &target));
        }
        let (loss, _) = crate::losses::binary_log_loss(tp.data(), target.data())?;
        self.push(
            Tensor::scalar(loss),
            Op::BinaryLogLoss { pred, target },
            "binary_log_loss",
        )
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(NnError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), out.cols());
                // dA = dC · op(B)ᵀ
                self.acc_with(grads, *a, ta.shape(), |beta, da| {
                    gemm(m, n, k, 1.0, gout.data(), false, tb.data(), !trans_b, beta, da)
                });
                // dB = Aᵀ · dC, or (Aᵀ · dC)ᵀ = dCᵀ · A for a transposed B
                self.acc_with(grads, *b, tb.shape(), |beta, db| {
                    if *trans_b {
                        gemm(n, m, k, 1.0, gout.data(), true, ta.data(), false, beta, db)
                    } else {
                        gemm(k, m, n, 1.0, ta.data(), true, gout.data(), false, beta, db)
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.shape(), gout.data());
                self.acc(grads, *b, gout.shape(), gout.data());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gout.shape(), gout.data());
                let neg: Vec<f64> = gout.data().iter().map(|v| -v).collect();
                self.acc(grads, *b, gout.shape(), &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = gout.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = gout.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                self.acc_owned(grads, *a, ta.shape(), da);
                self.acc_owned(grads, *b, tb.shape(), db);
            }
            Op::AddRow { a, row } => {
                self.acc(grads, *a, gout.shape(), gout.data());
                let c = gout.cols();
                let mut dr = vec![0.0; c];
                for (i, g) in gout.data().iter().enumerate() {
                    dr[i % c] += g;
                }
                self.acc(grads, *row, &[1, c], &dr);
            }
            Op::AddCol { a, col } => {
                self.acc(grads, *a, gout.shape(), gout.data());
                let (r, c) = (gout.rows(), gout.cols());
                let dc: Vec<f64> = (0..r).map(|i| gout.data()[i * c..(i + 1) * c].iter().sum()).collect();
                self.acc(grads, *col, &[r, 1], &dc);
            }
            Op::Scale(a, k) => {
                let d: Vec<f64> = gout.data().iter().map(|g| g * k).collect();
                self.acc(grads, *a, gout.shape(), &d);
            }
            Op::AddScalar(a) => self.acc(grads, *a, gout.shape(), gout.data()),
            Op::Sigmoid(a) => {
                let d: Vec<f64> = gout.data().iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.acc(grads, *a, gout.shape(), &d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = gout.data().iter().zip(out.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.acc(grads, *a, gout.shape(), &d);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let d: Vec<f64> = gout
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                    .collect();
                self.acc(grads, *a, gout.shape(), &d);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = gout.data().iter().zip(out.data()).map(|(g, e)| g * e).collect();
                self.acc(grads, *a, gout.shape(), &d);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let d: Vec<f64> = gout.data().iter().zip(x.data()).map(|(g, v)| g / v).collect();
                self.acc(grads, *a, gout.shape(), &d);
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let d: Vec<f64> = gout.data().iter().zip(x.data()).map(|(g, v)| 2.0 * g * v).collect();
                self.acc(grads, *a, gout.shape(), &d);
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let s = &out.data()[r * c..(r + 1) * c];
                    let g = &gout.data()[r * c..(r + 1) * c];
                    let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = s[j] * (g[j] - dot);
                    }
                }
                self.acc(grads, *a, gout.shape(), &d);
            }
            Op::MulConst(a, k) => {
                let d: Vec<f64> = gout.data().iter().zip(k.data()).map(|(g, m)| g * m).collect();
                self.acc(grads, *a, gout.shape(), &d);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (gout.rows(), gout.cols());
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gout.data()[r * total + off..r * total + off + w]);
                    }
                    self.acc(grads, p, &[rows, w], &d);
                    off += w;
                }
            }
            Op::SliceCols { a, start } => self.acc_cols(grads, *a, *start, gout),
            Op::ConcatRows(parts) => {
                let c = gout.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    self.acc(grads, p, &[r, c], &gout.data()[off * c..(off + r) * c]);
                    off += r;
                }
            }
            Op::SliceRows { a, start } => {
                if self.needs(*a) {
                    let src = self.value(*a);
                    let off = start * src.cols();
                    let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(src.shape()));
                    for (d, g) in slot.data_mut()[off..off + gout.len()].iter_mut().zip(gout.data()) {
                        *d += g;
                    }
                }
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, x.shape(), &vec![gout.data()[0]; x.len()]);
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let g = gout.data()[0] / x.len() as f64;
                self.acc(grads, *a, x.shape(), &vec![g; x.len()]);
            }
            Op::RowSums(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let d: Vec<f64> = (0..x.len()).map(|i| gout.data()[i / c]).collect();
                self.acc(grads, *a, x.shape(), &d);
            }
            Op::Lstm(cache) => self.lstm_backward(cache, gout, grads),
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let (_, d) = crate::losses::mse(p.data(), target.data()).expect("shapes checked");
                let d: Vec<f64> = d.iter().map(|v| v * gout.data()[0]).collect();
                self.acc(grads, *pred, p.shape(), &d);
            }
            Op::BinaryLogLoss { pred, target } => {
                let p = self.value(*pred);
                let (_, d) =
                    crate::losses::binary_log_loss(p.data(), target.data()).expect("shapes checked");
                let d: Vec<f64> = d.iter().map(|v| v * gout.data()[0]).collect();
                self.acc(grads, *pred, p.shape(), &d);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], node: NodeId, shape: &[usize], delta: &[f64]) {
        if self.needs(node) {
            accumulate(grads, node, shape, delta);
        }
    }

    /// Like [`Self::acc`] but takes the buffer, so a first contribution is
    /// moved in rather than copied.
    fn acc_owned(&self, grads: &mut [Option<Tensor>], node: NodeId, shape: &[usize], delta: Vec<f64>) {
        if !self.needs(node) {
            return;
        }
        match &mut grads[node.0] {
            Some(g) => g.data_mut().iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape")),
        }
    }

    /// Runs `f(beta, out)` straight into the gradient slot of `node`: beta 1
    /// adds to an existing gradient, beta 0 fills a fresh one. For GEMM
    /// contributions this skips the temporary and the separate add.
    fn acc_with(
        &self,
        grads: &mut [Option<Tensor>],
        node: NodeId,
        shape: &[usize],
        f: impl FnOnce(f64, &mut [f64]),
    ) {
        if !self.needs(node) {
            return;
        }
        match &mut grads[node.0] {
            Some(g) => f(1.0, g.data_mut()),
            slot @ None => {
                let mut d = vec![0.0; shape.iter().product()];
                f(0.0, &mut d);
                *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient shape"));
            }
        }
    }

    /// Adds `gout` into columns `start..` of the gradient of `node`.
    fn acc_cols(&self, grads: &mut [Option<Tensor>], node: NodeId, start: usize, gout: &Tensor) {
        if !self.needs(node) {
            return;
        }
        let src = self.value(node);
        let (rows, c, w) = (src.rows(), src.cols(), gout.cols());
        let slot = grads[node.0].get_or_insert_with(|| Tensor::zeros(src.shape()));
        let d = slot.data_mut();
        for r in 0..rows {
            for (a, b) in d[r * c + start..r * c + start + w].iter_mut().zip(gout.row_slice(r)) {
                *a += b;
            }
        }
    }

    fn lstm_backward(&self, cache: &LstmCache, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, th, tc) = (self.value(cache.x), self.value(cache.h), self.value(cache.c));
        let (twx, twh) = (self.value(cache.wx), self.value(cache.wh));
        let batch = tx.rows();
        let hid = th.cols();
        let g4 = 4 * hid;
        let gates = cache.gates.data();
        let mut dpre = vec![0.0; batch * g4];
        let mut dc_prev = vec![0.0; batch * hid];
        for r in 0..batch {
            for j in 0..hid {
                let gi = r * g4;
                let (i, f, g, o) = (
                    gates[gi + j],
                    gates[gi + hid + j],
                    gates[gi + 2 * hid + j],
                    gates[gi + 3 * hid + j],
                );
                let tcn = cache.tanh_c.data()[r * hid + j];
                let dh = gout.data()[r * 2 * hid + j];
                let dc_ext = gout.data()[r * 2 * hid + hid + j];
                let d_o = dh * tcn;
                let dc = dc_ext + dh * o * (1.0 - tcn * tcn);
                let d_i = dc * g;
                let d_g = dc * i;
                let d_f = dc * tc.data()[r * hid + j];
                dc_prev[r * hid + j] = dc * f;
                dpre[gi + j] = d_i * i * (1.0 - i);
                dpre[gi + hid + j] = d_f * f * (1.0 - f);
                dpre[gi + 2 * hid + j] = d_g * (1.0 - g * g);
                dpre[gi + 3 * hid + j] = d_o * o * (1.0 - o);
            }
        }
        let in_dim = tx.cols();
        self.acc_with(grads, cache.x, tx.shape(), |beta, dx| {
            gemm(batch, g4, in_dim, 1.0, &dpre, false, twx.data(), true, beta, dx)
        });
        self.acc_with(grads, cache.h, th.shape(), |beta, dh| {
            gemm(batch, g4, hid, 1.0, &dpre, false, twh.data(), true, beta, dh)
        });
        self.acc_owned(grads, cache.c, tc.shape(), dc_prev);
        self.acc_with(grads, cache.wx, twx.shape(), |beta, dwx| {
            gemm(in_dim, batch, g4, 1.0, tx.data(), true, &dpre, false, beta, dwx)
        });
        self.acc_with(grads, cache.wh, twh.shape(), |beta, dwh| {
            gemm(hid, batch, g4, 1.0, th.data(), true, &dpre, false, beta, dwh)
        });
        if self.needs(cache.b) {
            let mut db = vec![0.0; g4];
            for row in dpre.chunks(g4) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            self.acc(grads, cache.b, &[1, g4], &db);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], node: NodeId, shape: &[usize], delta: &[f64]) {
    match &mut grads[node.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("gradient shape"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exp_matches_libm() {
        let mut worst = 0.0f64;
        for i in 0..=200_000 {
            let x = -700.0 * (i as f64 / 200_000.0).powi(3);
            worst = worst.max((exp_nonpos(x) / x.exp() - 1.0).abs());
        }
        assert!(worst < 1e-15, "worst relative error {worst:e}");
        assert_eq!(exp_nonpos(0.0), 1.0);
        assert!(exp_nonpos(-1e4) > 0.0);
        for i in -3000..=3000 {
            let v = i as f64 * 1e-3;
            assert!((tanh(v) - v.tanh()).abs() <= 4e-16, "tanh({v}) off by {:e}", tanh(v) - v.tanh());
            assert!((sigmoid(v) - 1.0 / (1.0 + (-v).exp())).abs() <= 4e-16, "sigmoid({v})");
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(&[0.0, 0.0])).unwrap();
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn linear_sum_gradient_is_input_structure() {
        // loss = sum(x · W): dL/dW[i][j] = sum over rows of x[.., i]
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 3, vec![0.1; 6]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![3.0, -2.0]).unwrap()).unwrap();
        let wn = g.param(&store, w).unwrap();
        let y = g.matmul(x, wn).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        store.accumulate(&g, &grads);
        assert_eq!(store.grad(w).data(), &[3.0, 3.0, 3.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn second_backward_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(&[1.5, -0.5])).unwrap();
        let mut g = Graph::new();
        let wn = g.param(&store, w).unwrap();
        let sq = g.square(wn).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        store.accumulate(&g, &grads);
        let once = store.grad(w).clone();
        store.accumulate(&g, &grads);
        let twice = store.grad(w);
        for (a, b) in twice.data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(&[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(&[0.0])).unwrap();
        assert!(matches!(g.log(x), Err(NnError::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.input(Tensor::row(&[1.0, 2.0])).unwrap();
        let b = g.input(Tensor::row(&[1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(g.add(a, b), Err(NnError::ShapeMismatch { .. })));
        assert!(matches!(g.matmul(a, b), Err(NnError::ShapeMismatch { .. })));
    }
}
