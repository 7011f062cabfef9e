//! Performance and risk measures on per-period log returns.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const TRADING_DAYS: f64 = 252.0;
pub const DIFF_EPS: f64 = 1e-8;
const MIN_VARIANCE: f64 = 1e-18;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::NonFinite("return series"))
    }
}

/// Mean over population standard deviation.
pub fn sharpe(returns: &[f64]) -> Result<f64> {
    if returns.len() < 2 {
        return Err(CoreError::InsufficientData("sharpe needs >= 2 returns".into()));
    }
    check_finite(returns)?;
    let var = variance(returns);
    if var < MIN_VARIANCE {
        return Err(CoreError::Degenerate("zero-variance returns".into()));
    }
    Ok(mean(returns) / var.sqrt())
}

/// Mean over downside deviation `sqrt(mean(min(r - target, 0)^2))`.
pub fn sortino(returns: &[f64], target: f64) -> Result<f64> {
    check_finite(returns)?;
    if !returns.iter().any(|r| *r < target) {
        return Err(CoreError::Degenerate("no returns below target".into()));
    }
    let dd = (returns.iter().map(|r| (r - target).min(0.0).powi(2)).sum::<f64>() / returns.len() as f64).sqrt();
    Ok((mean(returns) - target) / dd)
}

/// `(VaR, CVaR)` at confidence `alpha` as positive loss magnitudes, using the
/// lower order statistic for the `(1 - alpha)` quantile.
pub fn var_cvar(returns: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CoreError::Invalid(format!("alpha {alpha} not in (0, 1)")));
    }
    let need = (1.0 / (1.0 - alpha) - 1e-9).ceil() as usize;
    if returns.len() < need {
        return Err(CoreError::InsufficientData(format!(
            "VaR at {alpha} needs >= {need} returns, got {}",
            returns.len()
        )));
    }
    check_finite(returns)?;
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (1.0 - alpha) * (sorted.len() - 1) as f64;
    let q = sorted[(pos + 1e-9).floor() as usize];
    let tail: Vec<f64> = sorted.iter().copied().take_while(|r| *r <= q).collect();
    // The tail mean cannot exceed its largest member; clamp rounding.
    Ok((-q, -mean(&tail).min(q)))
}

/// Largest peak-to-trough decline relative to the peak.
pub fn mdd(equity: &[f64]) -> Result<f64> {
    if equity.is_empty() {
        return Err(CoreError::InsufficientData("empty equity curve".into()));
    }
    if equity.iter().any(|v| !(*v > 0.0)) {
        return Err(CoreError::Invalid("equity curve must be positive".into()));
    }
    let mut peak = equity[0];
    let mut worst = 0.0f64;
    for &v in equity {
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak);
    }
    Ok(worst)
}

/// `(exp(mean * periods) - 1, std * sqrt(periods))`.
pub fn annualize(returns: &[f64], periods_per_year: f64) -> Result<(f64, f64)> {
    if returns.len() < 2 {
        return Err(CoreError::InsufficientData("annualize needs >= 2 returns".into()));
    }
    check_finite(returns)?;
    Ok((
        (mean(returns) * periods_per_year).exp() - 1.0,
        variance(returns).sqrt() * periods_per_year.sqrt(),
    ))
}

/// Exponential moving moments for the differential Sharpe ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsrState {
    pub nu: f64,
    pub omega: f64,
    pub eta: f64,
}

impl DsrState {
    pub fn new(eta: f64) -> Self {
        Self {
            nu: 0.0,
            omega: 0.0,
            eta,
        }
    }

    /// `d_t = (w dnu - nu dw / 2) / ((w - nu^2)^(3/2) + eps)`, then the
    /// moving moments advance by `eta`.
    pub fn update(&mut self, r: f64) -> f64 {
        let dnu = r - self.nu;
        let domega = r * r - self.omega;
        let var = (self.omega - self.nu * self.nu).max(0.0);
        let d = (self.omega * dnu - 0.5 * self.nu * domega) / (var.powf(1.5) + DIFF_EPS);
        self.nu += self.eta * dnu;
        self.omega += self.eta * domega;
        d
    }

    /// Moving-average Sharpe ratio `nu / sqrt(omega - nu^2)`.
    pub fn sharpe(&self) -> f64 {
        self.nu / (self.omega - self.nu * self.nu).sqrt()
    }
}

/// Exponential moving moments for the differential downside deviation ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct D3rState {
    pub nu: f64,
    /// Squared downside deviation.
    pub dd2: f64,
    pub eta: f64,
}

impl D3rState {
    pub fn new(eta: f64) -> Self {
        Self {
            nu: 0.0,
            dd2: 0.0,
            eta,
        }
    }

    pub fn update(&mut self, r: f64) -> f64 {
        let dd = self.dd2.sqrt();
        let d = if r > 0.0 {
            (r - 0.5 * self.nu) / (dd + DIFF_EPS)
        } else {
            (self.dd2 * (r - 0.5 * self.nu) - 0.5 * self.nu * r * r) / (dd * self.dd2 + DIFF_EPS)
        };
        self.nu += self.eta * (r - self.nu);
        self.dd2 += self.eta * (r.min(0.0).powi(2) - self.dd2);
        d
    }
}

/// Risk-adjusted reward stream selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskReward {
    Dsr(DsrState),
    D3r(D3rState),
}

impl RiskReward {
    pub fn update(&mut self, r: f64) -> f64 {
        match self {
            RiskReward::Dsr(s) => s.update(r),
            RiskReward::D3r(s) => s.update(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelation {
    pub lags: Vec<i64>,
    pub values: Vec<f64>,
    pub trend_lag: i64,
}

/// `R(l) = sum_t x(t) y(t - l)` over the overlap, on mean-removed series,
/// normalized by the overlap length and both standard deviations. The trend
/// lag is the argmax, ties resolved toward the smallest `|l|`.
pub fn cross_correlation(x: &[f64], y: &[f64], max_lag: usize) -> Result<CrossCorrelation> {
    let n = x.len();
    if y.len() != n || n <= max_lag || n < 2 {
        return Err(CoreError::InsufficientData(format!(
            "series of length {n}/{} too short for max lag {max_lag}",
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let xc: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
    let sx = variance(x).sqrt();
    let sy = variance(y).sqrt();
    let norm = if sx * sy > 0.0 { sx * sy } else { 1.0 };
    let ml = max_lag as i64;
    let mut lags = Vec::new();
    let mut values = Vec::new();
    for l in -ml..=ml {
        let mut s = 0.0;
        let mut count = 0;
        for t in 0..n as i64 {
            let u = t - l;
            if u >= 0 && u < n as i64 {
                s += xc[t as usize] * yc[u as usize];
                count += 1;
            }
        }
        lags.push(l);
        values.push(s / count as f64 / norm);
    }
    let mut best = 0;
    for k in 0..lags.len() {
        let better = values[k] > values[best]
            || (values[k] == values[best] && lags[k].abs() < lags[best].abs());
        if better {
            best = k;
        }
    }
    Ok(CrossCorrelation {
        trend_lag: lags[best],
        lags,
        values,
    })
}

/// Table-style summary of a backtest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub final_account_value: f64,
    pub ann_return: f64,
    pub ann_volatility: f64,
    pub sharpe: Option<f64>,
    pub sortino: Option<f64>,
    pub var_95: Option<f64>,
    pub cvar_95: Option<f64>,
    pub mdd: f64,
}

impl MetricsReport {
    /// Ratios that are undefined on the series (zero variance, no downside,
    /// too few points) are reported as `None`.
    pub fn compute(equity: &[f64], returns: &[f64], periods_per_year: f64) -> Result<Self> {
        let (ann_return, ann_volatility) = if returns.len() >= 2 {
            annualize(returns, periods_per_year)?
        } else {
            (0.0, 0.0)
        };
        let vc = var_cvar(returns, 0.95).ok();
        Ok(Self {
            final_account_value: *equity
                .last()
                .ok_or_else(|| CoreError::InsufficientData("empty equity curve".into()))?,
            ann_return,
            ann_volatility,
            sharpe: sharpe(returns).ok(),
            sortino: sortino(returns, 0.0).ok(),
            var_95: vc.map(|v| v.0),
            cvar_95: vc.map(|v| v.1),
            mdd: mdd(equity)?,
        })
    }
}
