//! Seeded synthetic markets and reference processes for tests and demos.

use chrono::{DateTime, Datelike, Duration, NaiveDate, Utc, Weekday};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::market::MarketData;

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Daily bars with trend persistence: each asset's log return is
/// `drift_i,t + phi * r_i,t-1 + beta * f_t + sigma * eps`, where the drift is
/// a slow AR(1) with coefficient `drift_persistence`. Highs and lows come from
/// an intrabar path of `intrabar_steps` increments pinned to the close.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticMarket {
    pub assets: usize,
    pub bars: usize,
    pub momentum: f64,
    pub drift_persistence: f64,
    pub drift_sd: f64,
    pub factor_loading: f64,
    pub volatility: f64,
    pub intrabar_steps: usize,
    pub start_price: f64,
}

impl Default for SyntheticMarket {
    fn default() -> Self {
        Self {
            assets: 8,
            bars: 3000,
            momentum: 0.3,
            drift_persistence: 0.98,
            drift_sd: 0.0008,
            factor_loading: 0.006,
            volatility: 0.012,
            intrabar_steps: 8,
            start_price: 100.0,
        }
    }
}

/// Business days (Mon-Fri) starting at `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<DateTime<Utc>> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc());
        }
        d += Duration::days(1);
    }
    out
}

impl SyntheticMarket {
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> MarketData {
        let m = self.assets;
        let n = self.bars;
        let steps = self.intrabar_steps.max(1);
        let mut close = vec![self.start_price; m];
        let mut drift = vec![0.0; m];
        let mut last_r = vec![0.0; m];
        let mut index = 1000.0;

        let mut data = MarketData {
            timestamps: business_days(NaiveDate::from_ymd_opt(2005, 1, 3).expect("date"), n),
            assets: (0..m).map(|i| format!("S{:02}", i + 1)).collect(),
            open: Vec::with_capacity(n),
            high: Vec::with_capacity(n),
            low: Vec::with_capacity(n),
            close: Vec::with_capacity(n),
            index: Some(Vec::with_capacity(n)),
            index_name: Some("INDEX".into()),
        };
        let drift_scale = (1.0 - self.drift_persistence.powi(2)).sqrt();
        for t in 0..n {
            let f = normal(rng);
            let (mut o, mut h, mut l, mut c) = (vec![1.0], vec![1.0], vec![1.0], vec![1.0]);
            let mut index_rel = 0.0;
            for i in 0..m {
                let open = close[i];
                let r = if t == 0 {
                    0.0
                } else {
                    drift[i] = self.drift_persistence * drift[i] + self.drift_sd * drift_scale * normal(rng);
                    drift[i] + self.momentum * last_r[i] + self.factor_loading * f + self.volatility * normal(rng)
                };
                last_r[i] = r;
                // Brownian bridge of intrabar log increments summing to r.
                let sd = self.volatility / (steps as f64).sqrt();
                let incs: Vec<f64> = (0..steps).map(|_| sd * normal(rng)).collect();
                let shift = (r - incs.iter().sum::<f64>()) / steps as f64;
                let (mut lvl, mut hi, mut lo) = (0.0f64, 0.0f64, 0.0f64);
                for x in incs {
                    lvl += x + shift;
                    hi = hi.max(lvl);
                    lo = lo.min(lvl);
                }
                let new_close = open * r.exp();
                o.push(open);
                h.push(open * hi.exp().max(r.exp()));
                l.push(open * lo.exp().min(r.exp()));
                c.push(new_close);
                index_rel += r.exp() / m as f64;
                close[i] = new_close;
            }
            if t > 0 {
                index *= index_rel;
            }
            data.open.push(o);
            data.high.push(h);
            data.low.push(l);
            data.close.push(c);
            data.index.as_mut().expect("index").push(index);
        }
        data
    }
}

/// `x_t = phi x_{t-1} + sd * eps_t` from `x_0 = 0`.
pub fn ar1<R: Rng + ?Sized>(n: usize, phi: f64, sd: f64, rng: &mut R) -> Vec<f64> {
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            x = phi * x + sd * normal(rng);
            x
        })
        .collect()
}

/// Vector AR(1): `x_t = A x_{t-1} + sd * eps_t` with `A` row-major `n x n`.
pub fn var1<R: Rng + ?Sized>(steps: usize, a: &[Vec<f64>], sd: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut x = vec![0.0; n];
    (0..steps)
        .map(|_| {
            let next: Vec<f64> = (0..n)
                .map(|i| a[i].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + sd * normal(rng))
                .collect();
            x = next.clone();
            next
        })
        .collect()
}
