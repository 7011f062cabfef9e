//! Event-driven market simulation: weights to orders, next-open execution
//! with fees and slippage, account tracking, rewards and the CRP benchmark.

use std::io::Write;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::agent::{AugmentedState, StateSpec};
use crate::error::{CoreError, Result};
use crate::market::{build_price_tensor, format_timestamp, MarketData, PriceTensor};
use crate::risk::MetricsReport;

/// Off-simplex weights within this distance are renormalized; beyond it
/// they are rejected.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    /// Weight-space accounting with proportional costs only.
    Idealized,
    /// Integer shares, next-open fills, slippage and a cash constraint.
    Realistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    pub fee_rate: f64,
    pub slippage_rate: f64,
    pub mode: ExecutionMode,
    /// Bars between decisions.
    pub decision_period: usize,
    /// Bars over which a realistic-mode rebalance is split.
    pub execution_period: usize,
    pub initial_value: f64,
    pub periods_per_year: f64,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            fee_rate: 0.002,
            slippage_rate: 0.005,
            mode: ExecutionMode::Idealized,
            decision_period: 1,
            execution_period: 1,
            initial_value: 500_000.0,
            periods_per_year: 252.0,
        }
    }
}

impl ExecutionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fee_rate >= 0.0 && self.fee_rate < 1.0) || !(self.slippage_rate >= 0.0 && self.slippage_rate < 1.0)
        {
            return Err(CoreError::Config("fee and slippage rates must lie in [0, 1)".into()));
        }
        if self.decision_period == 0 || self.execution_period == 0 {
            return Err(CoreError::Config("decision and execution periods must be >= 1".into()));
        }
        if self.execution_period > self.decision_period {
            return Err(CoreError::Config("execution period cannot exceed the decision period".into()));
        }
        if !(self.initial_value > 0.0) || !(self.periods_per_year > 0.0) {
            return Err(CoreError::Config("initial value and periods per year must be positive".into()));
        }
        Ok(())
    }
}

/// Checks `w` against the simplex, renormalizing small violations.
pub fn check_simplex(w: &[f64]) -> Result<Vec<f64>> {
    if w.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) {
        return Err(CoreError::Invalid(format!("weights {w:?} leave the simplex")));
    }
    let clipped: Vec<f64> = w.iter().map(|v| v.max(0.0)).collect();
    let s: f64 = clipped.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(CoreError::Invalid(format!("weights sum to {s}, not 1")));
    }
    Ok(clipped.into_iter().map(|v| v / s).collect())
}

/// `w' = (u * w) / (u . w)`.
pub fn drift_weights(w_prev: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if w_prev.len() != u.len() {
        return Err(CoreError::Invalid("weights and relatives differ in length".into()));
    }
    let growth: f64 = w_prev.iter().zip(u).map(|(w, u)| w * u).sum();
    if !(growth > 0.0) {
        return Err(CoreError::Invalid("portfolio growth must be positive".into()));
    }
    Ok(w_prev.iter().zip(u).map(|(w, u)| w * u / growth).collect())
}

/// `1 - c * sum_{i>=1} |w'_i - w_i|`; the cash leg trades free.
pub fn cost_factor(w_drifted: &[f64], w_target: &[f64], c: f64) -> f64 {
    1.0 - c * w_drifted
        .iter()
        .zip(w_target)
        .skip(1)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountState {
    pub cash: f64,
    /// Share counts, index 0 (cash) unused.
    pub shares: Vec<i64>,
    pub value: f64,
    pub weights: Vec<f64>,
}

impl AccountState {
    /// All value in cash: `w_0 = (1, 0, ..., 0)`.
    pub fn all_cash(value: f64, assets: usize) -> Self {
        let mut weights = vec![0.0; assets];
        weights[0] = 1.0;
        Self {
            cash: value,
            shares: vec![0; assets],
            value,
            weights,
        }
    }

    /// Revalues shares at `prices` and refreshes the weights.
    pub fn revalue(&mut self, prices: &[f64]) {
        let held: Vec<f64> = self
            .shares
            .iter()
            .zip(prices)
            .map(|(s, p)| *s as f64 * p)
            .collect();
        self.value = self.cash + held.iter().skip(1).sum::<f64>();
        self.weights = held;
        self.weights[0] = self.cash;
        let v = self.value;
        self.weights.iter_mut().for_each(|w| *w /= v);
    }
}

/// Holds `account.weights` through the move `u`, then rebalances to
/// `w_target` paying proportional costs. Returns `ln(c_bar * u . w_prev)`.
pub fn step_idealized(account: &mut AccountState, u: &[f64], w_target: &[f64], c: f64) -> Result<f64> {
    let growth: f64 = account.weights.iter().zip(u).map(|(w, u)| w * u).sum();
    let drifted = drift_weights(&account.weights, u)?;
    let target = check_simplex(w_target)?;
    let cbar = cost_factor(&drifted, &target, c);
    let factor = cbar * growth;
    if !(factor > 0.0) {
        return Err(CoreError::Invalid("step wipes out the account".into()));
    }
    account.value *= factor;
    account.weights = target;
    Ok(factor.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Order {
    pub asset: usize,
    /// Positive buys, negative sells.
    pub quantity: i64,
}

/// Orders moving the held shares to `floor(w_i * value / p_i)` at the
/// decision prices. Residual value stays in cash.
pub fn rebalance_orders(account: &AccountState, w_target: &[f64], prices: &[f64]) -> Result<Vec<Order>> {
    let w = check_simplex(w_target)?;
    if prices.len() != w.len() || account.shares.len() != w.len() {
        return Err(CoreError::Invalid("orders: length mismatch".into()));
    }
    let mut orders = Vec::new();
    for i in 1..w.len() {
        if !(prices[i] > 0.0) {
            return Err(CoreError::Invalid(format!("non-positive price for asset {i}")));
        }
        let target = (w[i] * account.value / prices[i]).floor() as i64;
        let q = target - account.shares[i];
        if q != 0 {
            orders.push(Order { asset: i, quantity: q });
        }
    }
    Ok(orders)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fill {
    pub step: usize,
    pub asset: usize,
    pub quantity: i64,
    pub price: f64,
    pub fee: f64,
}

/// Executes at `open` with adverse slippage: sells first, then buys scaled
/// down together to what the cash can pay for including fees. Revalues at
/// `close`. Returns the fills and whether any buy was scaled.
pub fn execute(
    account: &mut AccountState,
    orders: &[Order],
    open: &[f64],
    close: &[f64],
    cfg: &ExecutionConfig,
    step: usize,
) -> Result<(Vec<Fill>, bool)> {
    let mut fills = Vec::new();
    for o in orders {
        if o.asset == 0 || o.asset >= account.shares.len() {
            return Err(CoreError::Invalid(format!("order for unknown asset {}", o.asset)));
        }
    }
    for o in orders.iter().filter(|o| o.quantity < 0) {
        let qty = o.quantity.max(-account.shares[o.asset]);
        if qty == 0 {
            continue;
        }
        let price = open[o.asset] * (1.0 - cfg.slippage_rate);
        let notional = -qty as f64 * price;
        let fee = cfg.fee_rate * notional;
        account.cash += notional - fee;
        account.shares[o.asset] += qty;
        fills.push(Fill {
            step,
            asset: o.asset,
            quantity: qty,
            price,
            fee,
        });
    }
    let buys: Vec<(usize, i64, f64)> = orders
        .iter()
        .filter(|o| o.quantity > 0)
        .map(|o| (o.asset, o.quantity, open[o.asset] * (1.0 + cfg.slippage_rate)))
        .collect();
    let need: f64 = buys.iter().map(|(_, q, p)| *q as f64 * p * (1.0 + cfg.fee_rate)).sum();
    let scale = if need > account.cash.max(0.0) {
        account.cash.max(0.0) / need
    } else {
        1.0
    };
    let scaled = scale < 1.0;
    if scaled {
        log::info!("step {step}: buys scaled by {scale:.6} to fit cash {:.2}", account.cash);
    }
    for (asset, q, price) in buys {
        let mut qty = if scaled { (q as f64 * scale).floor() as i64 } else { q };
        // Guard the floor against rounding in the product.
        while qty > 0 && qty as f64 * price * (1.0 + cfg.fee_rate) > account.cash {
            qty -= 1;
        }
        if qty == 0 {
            continue;
        }
        let notional = qty as f64 * price;
        let fee = cfg.fee_rate * notional;
        account.cash -= notional + fee;
        account.shares[asset] += qty;
        fills.push(Fill {
            step,
            asset,
            quantity: qty,
            price,
            fee,
        });
    }
    account.revalue(close);
    Ok((fills, scaled))
}

/// Market history visible at a decision: bars `0..=t` only.
#[derive(Debug, Clone, Copy)]
pub struct History<'a> {
    data: &'a MarketData,
    t: usize,
}

impl<'a> History<'a> {
    pub fn new(data: &'a MarketData, t: usize) -> Result<Self> {
        if t >= data.len() {
            return Err(CoreError::InsufficientData(format!("bar {t} beyond data of {}", data.len())));
        }
        Ok(Self { data, t })
    }

    /// The decision bar.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn num_risky(&self) -> usize {
        self.data.num_risky()
    }

    pub fn timestamp(&self) -> DateTime<Utc> {
        self.data.timestamps[self.t]
    }

    pub fn close(&self) -> &[f64] {
        &self.data.close[self.t]
    }

    pub fn price_tensor(&self, k2: usize) -> Result<PriceTensor> {
        build_price_tensor(self.data, self.t, k2)
    }

    /// Close/high/low changes of bar `t`, or zeros at the first bar.
    pub fn hlc_changes(&self) -> Vec<f64> {
        if self.t == 0 {
            vec![0.0; 3 * self.num_risky()]
        } else {
            self.data.hlc_changes(self.t)
        }
    }

    pub fn index_ratio(&self) -> f64 {
        self.data.index_ratio(self.t)
    }

    /// Close/high/low changes of bar `1 <= s <= t`.
    pub fn hlc_changes_at(&self, s: usize) -> Result<Vec<f64>> {
        if s == 0 || s > self.t {
            return Err(CoreError::Invalid(format!("changes of bar {s} not visible at bar {}", self.t)));
        }
        Ok(self.data.hlc_changes(s))
    }

    /// Agent state at the decision bar.
    pub fn state(&self, spec: &StateSpec, w_prev: &[f64], prediction: Option<&[f64]>) -> Result<AugmentedState> {
        spec.build(self.data, self.t, w_prev, prediction)
    }

    /// Price relative of bar `s <= t`.
    pub fn relative(&self, s: usize) -> Result<Vec<f64>> {
        if s == 0 || s > self.t {
            return Err(CoreError::Invalid(format!("relative {s} not visible at bar {}", self.t)));
        }
        Ok(self.data.relative(s))
    }
}

/// Everything a policy may use to pick target weights.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    pub history: History<'a>,
    /// Weights after drifting to the decision bar.
    pub weights: &'a [f64],
    /// Target weights chosen at the previous decision.
    pub prev_action: &'a [f64],
    pub value: f64,
}

pub trait Policy {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Vec<f64>>;
}

impl<F: FnMut(&DecisionContext<'_>) -> Result<Vec<f64>>> Policy for F {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Vec<f64>> {
        self(ctx)
    }
}

/// Rebalances to a fixed weight vector at every decision.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    fn decide(&mut self, _ctx: &DecisionContext<'_>) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub timestamps: Vec<DateTime<Utc>>,
    /// `equity[0]` is the initial value; one entry per simulated bar after.
    pub equity: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Weights held after each rebalance.
    pub weights: Vec<Vec<f64>>,
    pub fills: Vec<Fill>,
    pub scaled_steps: usize,
    pub metrics: MetricsReport,
}

impl BacktestResult {
    pub fn write_equity_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let m = self.weights.first().map_or(0, Vec::len);
        let mut header = vec!["timestamp".to_string(), "equity".into(), "reward".into()];
        header.extend((0..m).map(|i| format!("w{i}")));
        w.write_record(&header)?;
        for (k, ts) in self.timestamps.iter().enumerate() {
            let mut row = vec![format_timestamp(ts), self.equity[k].to_string()];
            if k == 0 {
                row.push(String::new());
                row.extend((0..m).map(|_| String::new()));
            } else {
                row.push(self.rewards[k - 1].to_string());
                row.extend(self.weights[k - 1].iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| CoreError::io("<equity csv>", e))?;
        Ok(())
    }

    pub fn write_fills_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "asset", "quantity", "price", "fee"])?;
        for f in &self.fills {
            w.write_record([
                f.step.to_string(),
                f.asset.to_string(),
                f.quantity.to_string(),
                f.price.to_string(),
                f.fee.to_string(),
            ])?;
        }
        w.flush().map_err(|e| CoreError::io("<fills csv>", e))?;
        Ok(())
    }
}

/// Runs `policy` from decision bar `first_decision` to the end of `data`.
/// Each step decides at bar `t` (on the decision-period grid), trades, and
/// realizes the move to bar `t + 1`.
pub fn run_backtest<P: Policy + ?Sized>(
    policy: &mut P,
    data: &MarketData,
    first_decision: usize,
    cfg: &ExecutionConfig,
) -> Result<BacktestResult> {
    cfg.validate()?;
    if data.len() < first_decision + 2 {
        return Err(CoreError::InsufficientData(format!(
            "{} bars leave no step after decision bar {first_decision}",
            data.len()
        )));
    }
    let n = data.num_risky() + 1;
    let mut account = AccountState::all_cash(cfg.initial_value, n);
    let mut prev_action = account.weights.clone();
    let mut pending: Vec<Vec<Order>> = Vec::new();
    let mut out = BacktestResult {
        timestamps: vec![data.timestamps[first_decision]],
        equity: vec![account.value],
        rewards: Vec::new(),
        weights: Vec::new(),
        fills: Vec::new(),
        scaled_steps: 0,
        metrics: MetricsReport::compute(&[account.value], &[], cfg.periods_per_year)?,
    };
    for t in first_decision..data.len() - 1 {
        let decide = (t - first_decision).is_multiple_of(cfg.decision_period);
        let target = if decide {
            let ctx = DecisionContext {
                history: History::new(data, t)?,
                weights: &account.weights,
                prev_action: &prev_action,
                value: account.value,
            };
            let w = check_simplex(&policy.decide(&ctx)?)?;
            if w.len() != n {
                return Err(CoreError::Invalid(format!("policy returned {} weights, need {n}", w.len())));
            }
            prev_action = w.clone();
            Some(w)
        } else {
            None
        };
        let before = account.value;
        match cfg.mode {
            ExecutionMode::Idealized => {
                let w = target.unwrap_or_else(|| account.weights.clone());
                let cbar = cost_factor(&account.weights, &w, cfg.fee_rate);
                let u = data.relative(t + 1);
                let growth: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
                account.value *= cbar * growth;
                account.weights = drift_weights(&w, &u)?;
                out.rewards.push((cbar * growth).ln());
                out.weights.push(w);
            }
            ExecutionMode::Realistic => {
                if let Some(w) = &target {
                    let orders = rebalance_orders(&account, w, &data.close[t])?;
                    pending = split_orders(&orders, cfg.execution_period);
                    pending.reverse();
                }
                let slice = pending.pop().unwrap_or_default();
                let (fills, scaled) = execute(&mut account, &slice, &data.open[t + 1], &data.close[t + 1], cfg, t)?;
                out.scaled_steps += usize::from(scaled);
                out.fills.extend(fills);
                if !(account.value > 0.0) {
                    return Err(CoreError::Invalid("account value reached zero".into()));
                }
                out.rewards.push((account.value / before).ln());
                out.weights.push(account.weights.clone());
            }
        }
        out.equity.push(account.value);
        out.timestamps.push(data.timestamps[t + 1]);
    }
    out.metrics = MetricsReport::compute(&out.equity, &out.rewards, cfg.periods_per_year)?;
    Ok(out)
}

/// Splits each order into `parts` integer slices, remainder in the last.
fn split_orders(orders: &[Order], parts: usize) -> Vec<Vec<Order>> {
    let mut out = vec![Vec::new(); parts];
    for o in orders {
        let base = o.quantity / parts as i64;
        for (k, slot) in out.iter_mut().enumerate() {
            let q = if k + 1 == parts {
                o.quantity - base * (parts as i64 - 1)
            } else {
                base
            };
            if q != 0 {
                slot.push(Order {
                    asset: o.asset,
                    quantity: q,
                });
            }
        }
    }
    out
}

/// Constantly rebalanced portfolio with equal weight on every asset,
/// including cash.
pub fn run_crp(data: &MarketData, first_decision: usize, cfg: &ExecutionConfig) -> Result<BacktestResult> {
    let n = data.num_risky() + 1;
    run_backtest(&mut ConstantPolicy(vec![1.0 / n as f64; n]), data, first_decision, cfg)
}
