//! Online nonlinear dynamic Boltzmann machine used as the price-change
//! predictor.
//!
//! Each unit is Gaussian with mean
//! `mu = b + sum_delta F[delta] x[t-delta] + sum_k G_k alpha_k`, where the
//! bias is shifted by a linear readout of a reservoir RNN. Learning
//! is RMSProp ascent on the one-step log-density with analytic gradients.
//! Nothing is backpropagated through time, so a step costs the same however
//! long the stream is.

use std::collections::VecDeque;

use folio_nn::{Checkpoint, OptimizerState, ParamId, ParamRecord, ParamStore, Tensor};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NdybmConfig {
    /// Connection delay `d`; the FIFO holds `d - 1` past vectors.
    pub delay: usize,
    pub decay_rates: Vec<f64>,
    pub rnn_dim: usize,
    pub learning_rate: f64,
    pub spectral_radius: f64,
    pub w_in_sd: f64,
    pub sigma2_floor: f64,
    pub noise_sd: f64,
    pub savgol_window: usize,
    pub savgol_order: usize,
}

impl Default for NdybmConfig {
    fn default() -> Self {
        Self {
            delay: 3,
            decay_rates: vec![0.1, 0.2, 0.5, 0.8],
            rnn_dim: 100,
            learning_rate: 1e-3,
            spectral_radius: 0.95,
            w_in_sd: 0.1,
            sigma2_floor: 1e-6,
            noise_sd: 0.01,
            savgol_window: 5,
            savgol_order: 3,
        }
    }
}

impl NdybmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delay < 1 {
            return Err(CoreError::Config("ndybm delay must be >= 1".into()));
        }
        if self.decay_rates.iter().any(|l| !(0.0..1.0).contains(l)) {
            return Err(CoreError::Config("ndybm decay rates must lie in [0, 1)".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.sigma2_floor > 0.0) {
            return Err(CoreError::Config("ndybm rates must be non-negative".into()));
        }
        if self.savgol_window.is_multiple_of(2) || self.savgol_window <= self.savgol_order {
            return Err(CoreError::Config("savgol window must be odd and exceed the order".into()));
        }
        Ok(())
    }
}

/// Predicted next-step percentage changes, one entry per risky asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTriplet {
    pub h_close: Vec<f64>,
    pub h_high: Vec<f64>,
    pub h_low: Vec<f64>,
}

impl PredictionTriplet {
    /// Splits a `[close m, high m, low m]` vector.
    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if !v.len().is_multiple_of(3) {
            return Err(CoreError::Invalid(format!("{} units is not a multiple of 3", v.len())));
        }
        let m = v.len() / 3;
        Ok(Self {
            h_close: v[..m].to_vec(),
            h_high: v[m..2 * m].to_vec(),
            h_low: v[2 * m..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        [self.h_close.as_slice(), &self.h_high, &self.h_low].concat()
    }
}

/// Gradient of the log-density for every learned parameter, laid out like the
/// parameters themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct NdybmGradient {
    pub b: Vec<f64>,
    /// `f[delta - 1][j * n + i]`.
    pub f: Vec<Vec<f64>>,
    /// `g[k][j * n + i]`.
    pub g: Vec<Vec<f64>>,
    /// `a[r * n + j]`.
    pub a: Vec<f64>,
    pub log_sigma2: Vec<f64>,
}

impl NdybmGradient {
    fn is_finite(&self) -> bool {
        self.b
            .iter()
            .chain(self.f.iter().flatten())
            .chain(self.g.iter().flatten())
            .chain(&self.a)
            .chain(&self.log_sigma2)
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
struct Ids {
    b: ParamId,
    f: Vec<ParamId>,
    g: Vec<ParamId>,
    a: ParamId,
    log_sigma2: ParamId,
}

#[derive(Debug, Clone)]
pub struct NdybmState {
    cfg: NdybmConfig,
    n: usize,
    store: ParamStore,
    ids: Ids,
    opt: OptimizerState,
    /// Most recent first: `fifo[0] = x[t-1]`, length `d - 1`.
    fifo: VecDeque<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    psi: Vec<f64>,
    /// Row-major `M x M`.
    w_rnn: Vec<f64>,
    /// Row-major `M x N`.
    w_in: Vec<f64>,
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o += w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Largest eigenvalue modulus of a square row-major matrix.
pub fn spectral_radius(w: &[f64], n: usize) -> f64 {
    DMatrix::from_row_slice(n, n, w)
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

impl NdybmState {
    /// Zero weights, unit variances, and a reservoir drawn from `N(0, 1)`
    /// rescaled to the configured spectral radius.
    pub fn new<R: Rng + ?Sized>(n: usize, cfg: NdybmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if n == 0 {
            return Err(CoreError::Invalid("ndybm needs at least one unit".into()));
        }
        let m = cfg.rnn_dim;
        let mut store = ParamStore::new();
        let b = store.add("b", Tensor::zeros(&[1, n]))?;
        let f = (1..cfg.delay)
            .map(|d| store.add(format!("F{d}"), Tensor::zeros(&[n, n])))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let g = (1..=cfg.decay_rates.len())
            .map(|k| store.add(format!("G{k}"), Tensor::zeros(&[n, n])))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let a = store.add("A", Tensor::zeros(&[m.max(1), n]))?;
        let log_sigma2 = store.add("log_sigma2", Tensor::zeros(&[1, n]))?;

        let mut w_rnn: Vec<f64> = (0..m * m).map(|_| StandardNormal.sample(rng)).collect();
        if m > 0 {
            let rho = spectral_radius(&w_rnn, m);
            if rho > 0.0 {
                let k = cfg.spectral_radius / rho;
                w_rnn.iter_mut().for_each(|v| *v *= k);
            }
        }
        let normal = Normal::new(0.0, cfg.w_in_sd)
            .map_err(|e| CoreError::Config(format!("w_in_sd: {e}")))?;
        let w_in = (0..m * n).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            n,
            store,
            ids: Ids {
                b,
                f,
                g,
                a,
                log_sigma2,
            },
            opt: OptimizerState::rmsprop(cfg.learning_rate),
            fifo: (1..cfg.delay).map(|_| vec![0.0; n]).collect(),
            alpha: cfg.decay_rates.iter().map(|_| vec![0.0; n]).collect(),
            psi: vec![0.0; m],
            w_rnn,
            w_in,
            cfg,
        })
    }

    pub fn units(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> &NdybmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn fifo(&self) -> &VecDeque<Vec<f64>> {
        &self.fifo
    }

    pub fn fifo_mut(&mut self) -> &mut VecDeque<Vec<f64>> {
        &mut self.fifo
    }

    pub fn traces(&self) -> &[Vec<f64>] {
        &self.alpha
    }

    pub fn traces_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.alpha
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn psi_mut(&mut self) -> &mut [f64] {
        &mut self.psi
    }

    pub fn reservoir_mut(&mut self) -> (&mut Vec<f64>, &mut Vec<f64>) {
        (&mut self.w_rnn, &mut self.w_in)
    }

    pub fn b_id(&self) -> ParamId {
        self.ids.b
    }

    pub fn f_ids(&self) -> &[ParamId] {
        &self.ids.f
    }

    pub fn g_ids(&self) -> &[ParamId] {
        &self.ids.g
    }

    pub fn a_id(&self) -> ParamId {
        self.ids.a
    }

    pub fn log_sigma2_id(&self) -> ParamId {
        self.ids.log_sigma2
    }

    /// The bias vector in effect for the next prediction: the learned `b` plus
    /// the reservoir readout `A^T psi`.
    pub fn bias(&self) -> Vec<f64> {
        let mut out = self.store.value(self.ids.b).data().to_vec();
        self.add_readout(&mut out);
        out
    }

    fn add_readout(&self, out: &mut [f64]) {
        let a = self.store.value(self.ids.a).data();
        for (r, p) in self.psi.iter().enumerate() {
            if *p != 0.0 {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += a[r * self.n + j] * p;
                }
            }
        }
    }

    pub fn sigma2(&self) -> Vec<f64> {
        self.store.value(self.ids.log_sigma2).data().iter().map(|v| v.exp()).collect()
    }

    /// Expected value of every unit given the history held in the state.
    pub fn mu(&self) -> Vec<f64> {
        let n = self.n;
        let mut mu = self.bias();
        for (id, x) in self.ids.f.iter().zip(&self.fifo) {
            matvec(self.store.value(*id).data(), n, n, x, &mut mu);
        }
        for (id, a) in self.ids.g.iter().zip(&self.alpha) {
            matvec(self.store.value(*id).data(), n, n, a, &mut mu);
        }
        mu
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(CoreError::Invalid(format!(
                "ndybm expects {} units, got {}",
                self.n,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("ndybm input"));
        }
        Ok(())
    }

    /// `log p(x | history)` under the current parameters.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        let mu = self.mu();
        let ls = self.store.value(self.ids.log_sigma2).data();
        Ok(x.iter()
            .zip(&mu)
            .zip(ls)
            .map(|((x, m), l)| {
                -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * l - (x - m).powi(2) / (2.0 * l.exp())
            })
            .sum())
    }

    /// Analytic gradient of [`log_density`](Self::log_density).
    pub fn gradient(&self, x: &[f64]) -> Result<NdybmGradient> {
        self.check_len(x)?;
        let n = self.n;
        let mu = self.mu();
        let s2 = self.sigma2();
        let dmu: Vec<f64> = (0..n).map(|j| (x[j] - mu[j]) / s2[j]).collect();
        let outer = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n * n];
            for j in 0..n {
                for i in 0..n {
                    out[j * n + i] = dmu[j] * v[i];
                }
            }
            out
        };
        let mut a = vec![0.0; self.psi.len().max(1) * n];
        for (r, p) in self.psi.iter().enumerate() {
            for j in 0..n {
                a[r * n + j] = p * dmu[j];
            }
        }
        // d/d(log s2) = s2 * d/d(s2) = ((x - mu)^2 - s2) / (2 s2).
        let log_sigma2 = (0..n)
            .map(|j| ((x[j] - mu[j]).powi(2) - s2[j]) / (2.0 * s2[j]))
            .collect();
        Ok(NdybmGradient {
            f: self.fifo.iter().map(|v| outer(v)).collect(),
            g: self.alpha.iter().map(|v| outer(v)).collect(),
            b: dmu,
            a,
            log_sigma2,
        })
    }

    /// `alpha_k <- lambda_k alpha_k + v` for every trace.
    pub fn trace_update(&mut self, injected: &[f64]) {
        for (alpha, lambda) in self.alpha.iter_mut().zip(&self.cfg.decay_rates) {
            for (a, v) in alpha.iter_mut().zip(injected) {
                *a = lambda * *a + v;
            }
        }
    }

    /// Pushes `x` into the FIFO and returns the vector leaving it. With
    /// `d = 1` the FIFO is empty and `x` itself passes through.
    pub fn fifo_push(&mut self, x: &[f64]) -> Vec<f64> {
        if self.fifo.is_empty() {
            return x.to_vec();
        }
        self.fifo.push_front(x.to_vec());
        self.fifo.pop_back().expect("fifo nonempty")
    }

    /// `psi <- tanh(W_rnn psi + W_in x)`. The bias in effect moves with it,
    /// `bias = b + A^T psi`; the readout is not integrated into `b`.
    pub fn rnn_bias_update(&mut self, x: &[f64]) {
        let m = self.psi.len();
        let mut pre = vec![0.0; m];
        matvec(&self.w_rnn, m, m, &self.psi, &mut pre);
        matvec(&self.w_in, m, self.n, x, &mut pre);
        for (p, v) in self.psi.iter_mut().zip(pre) {
            *p = v.tanh();
        }
    }

    /// One online learning step on the observation `x`: RMSProp ascent on the
    /// log-density, then FIFO and traces, then the reservoir and bias. A
    /// non-finite gradient leaves the state untouched.
    pub fn update(&mut self, x: &[f64]) -> Result<()> {
        let grad = self.gradient(x)?;
        if !grad.is_finite() {
            return Err(CoreError::NonFinite("ndybm gradient"));
        }
        if self.cfg.learning_rate > 0.0 {
            self.store.zero_grad();
            // The optimizer descends, so hand it the negated ascent direction.
            let set = |store: &mut ParamStore, id: ParamId, g: &[f64]| {
                for (d, s) in store.grad_mut(id).data_mut().iter_mut().zip(g) {
                    *d = -s;
                }
            };
            set(&mut self.store, self.ids.b, &grad.b);
            for (id, g) in self.ids.f.clone().iter().zip(&grad.f) {
                set(&mut self.store, *id, g);
            }
            for (id, g) in self.ids.g.clone().iter().zip(&grad.g) {
                set(&mut self.store, *id, g);
            }
            set(&mut self.store, self.ids.a, &grad.a);
            set(&mut self.store, self.ids.log_sigma2, &grad.log_sigma2);
            self.opt.step(&mut self.store)?;
            let floor = self.cfg.sigma2_floor.ln();
            for v in self.store.value_mut(self.ids.log_sigma2).data_mut() {
                *v = v.max(floor);
            }
        }
        let leaving = self.fifo_push(x);
        self.trace_update(&leaving);
        self.rnn_bias_update(x);
        Ok(())
    }

    /// Predicts the next observation, then learns from `x`. The returned
    /// prediction is for the step *at which `x` is observed*, computed before
    /// `x` is seen; call [`predict`](Self::predict) afterwards for the next.
    pub fn ipm_step(&mut self, x: &[f64]) -> Result<PredictionTriplet> {
        let pred = PredictionTriplet::from_flat(&self.mu())?;
        self.update(x)?;
        Ok(pred)
    }

    pub fn predict(&self) -> Result<PredictionTriplet> {
        PredictionTriplet::from_flat(&self.mu())
    }

    /// Learned parameters plus the reservoir, FIFO, traces, RNN state and
    /// RMSProp moments, so a restored state keeps learning exactly as the
    /// original would.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.store.to_checkpoint();
        let m = self.psi.len();
        let rec = |name: String, shape: Vec<usize>, values: Vec<f64>| ParamRecord {
            name,
            shape,
            values,
        };
        ck.params.push(rec("state.w_rnn".into(), vec![m, m], self.w_rnn.clone()));
        ck.params.push(rec("state.w_in".into(), vec![m, self.n], self.w_in.clone()));
        ck.params.push(rec("state.psi".into(), vec![1, m], self.psi.clone()));
        for (i, v) in self.fifo.iter().enumerate() {
            ck.params.push(rec(format!("state.fifo{i}"), vec![1, self.n], v.clone()));
        }
        for (k, v) in self.alpha.iter().enumerate() {
            ck.params.push(rec(format!("state.alpha{k}"), vec![1, self.n], v.clone()));
        }
        let (m1, m2) = self.opt.moments();
        for (i, (a, b)) in m1.iter().zip(m2).enumerate() {
            ck.params.push(rec(format!("opt.m{i}"), a.shape().to_vec(), a.data().to_vec()));
            ck.params.push(rec(format!("opt.v{i}"), b.shape().to_vec(), b.data().to_vec()));
        }
        ck.params.push(rec("opt.steps".into(), vec![1, 1], vec![self.opt.steps() as f64]));
        Ok(ck)
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let (opt, rest): (Vec<_>, Vec<_>) = ck.params.iter().cloned().partition(|r| r.name.starts_with("opt."));
        let (state, params): (Vec<_>, Vec<_>) = rest.into_iter().partition(|r| r.name.starts_with("state."));
        self.store.load_checkpoint(&Checkpoint { params })?;
        self.load_optimizer(&opt)?;
        for r in state {
            let expect = |len: usize| -> Result<()> {
                if r.values.len() != len {
                    return Err(CoreError::Invalid(format!("checkpoint record {} has bad length", r.name)));
                }
                Ok(())
            };
            let m = self.psi.len();
            match r.name.as_str() {
                "state.w_rnn" => {
                    expect(m * m)?;
                    self.w_rnn = r.values.clone();
                }
                "state.w_in" => {
                    expect(m * self.n)?;
                    self.w_in = r.values.clone();
                }
                "state.psi" => {
                    expect(m)?;
                    self.psi = r.values.clone();
                }
                name => {
                    expect(self.n)?;
                    let slot = if let Some(i) = name.strip_prefix("state.fifo") {
                        i.parse::<usize>().ok().and_then(|i| self.fifo.get_mut(i))
                    } else if let Some(k) = name.strip_prefix("state.alpha") {
                        k.parse::<usize>().ok().and_then(|k| self.alpha.get_mut(k))
                    } else {
                        None
                    };
                    let slot = slot.ok_or_else(|| {
                        CoreError::Invalid(format!("unknown checkpoint record {name}"))
                    })?;
                    *slot = r.values.clone();
                }
            }
        }
        Ok(())
    }
}

impl NdybmState {
    /// A checkpoint without optimizer records restarts the moments.
    fn load_optimizer(&mut self, records: &[ParamRecord]) -> Result<()> {
        let find = |name: String| records.iter().find(|r| r.name == name);
        let Some(steps) = find("opt.steps".into()) else {
            return Ok(());
        };
        let (mut m, mut v) = (Vec::new(), Vec::new());
        while let (Some(a), Some(b)) = (find(format!("opt.m{}", m.len())), find(format!("opt.v{}", m.len()))) {
            m.push(Tensor::new(a.shape.clone(), a.values.clone())?);
            v.push(Tensor::new(b.shape.clone(), b.values.clone())?);
        }
        if 2 * m.len() + 1 != records.len() {
            return Err(CoreError::Invalid("inconsistent optimizer records in checkpoint".into()));
        }
        let steps = steps.values.first().copied().unwrap_or(0.0) as u64;
        self.opt.set_moments(m, v, steps)?;
        Ok(())
    }
}

/// Savitzky-Golay weights producing the fitted value at offset 0 from the
/// samples at offsets `-left..=right`, fitting a polynomial of degree
/// `min(order, left + right)`.
pub fn savgol_weights(left: usize, right: usize, order: usize) -> Result<Vec<f64>> {
    let len = left + right + 1;
    let deg = order.min(len - 1);
    let v = DMatrix::from_fn(len, deg + 1, |r, c| (r as f64 - left as f64).powi(c as i32));
    let vt = v.transpose();
    let inv = (&vt * &v)
        .try_inverse()
        .ok_or_else(|| CoreError::Degenerate("singular savgol normal matrix".into()))?;
    // Row 0 of (V^T V)^-1 V^T evaluates the polynomial's constant term.
    let h = inv * vt;
    Ok(h.row(0).iter().copied().collect())
}

/// Savitzky-Golay smoothing of each dimension. Interior points use the
/// symmetric window; the first and last `window / 2` points use the truncated
/// window available to them.
pub fn savgol(series: &[Vec<f64>], window: usize, order: usize) -> Result<Vec<Vec<f64>>> {
    if window.is_multiple_of(2) || window <= order {
        return Err(CoreError::Invalid(format!(
            "savgol window {window} must be odd and exceed order {order}"
        )));
    }
    let t = series.len();
    if t < window {
        return Err(CoreError::InsufficientData(format!(
            "series of length {t} shorter than savgol window {window}"
        )));
    }
    let half = window / 2;
    let mut out = vec![vec![0.0; series[0].len()]; t];
    for (i, row) in out.iter_mut().enumerate() {
        let left = half.min(i);
        let right = half.min(t - 1 - i);
        let w = savgol_weights(left, right, order)?;
        for (k, wk) in w.iter().enumerate() {
            let src = &series[i + k - left];
            for (o, s) in row.iter_mut().zip(src) {
                *o += wk * s;
            }
        }
    }
    Ok(out)
}

/// Adds `N(0, noise_sd)` to every entry, then applies [`savgol`].
pub fn smooth_inputs<R: Rng + ?Sized>(
    series: &[Vec<f64>],
    noise_sd: f64,
    window: usize,
    order: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let noisy: Vec<Vec<f64>> = series
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(rng);
                    v + noise_sd * e
                })
                .collect()
        })
        .collect();
    savgol(&noisy, window, order)
}

/// Offline pass over a training stream after noise injection and smoothing.
pub fn pretrain<R: Rng + ?Sized>(state: &mut NdybmState, xs: &[Vec<f64>], rng: &mut R) -> Result<()> {
    let cfg = state.config().clone();
    let smoothed = if xs.len() >= cfg.savgol_window {
        smooth_inputs(xs, cfg.noise_sd, cfg.savgol_window, cfg.savgol_order, rng)?
    } else {
        xs.to_vec()
    };
    for x in &smoothed {
        state.update(x)?;
    }
    Ok(())
}
