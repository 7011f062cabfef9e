//! OHLC ingestion, alignment, aggregation and the observation tensors.
//!
//! Asset index 0 is always the synthesized cash asset whose prices are
//! identically 1; risky assets follow in the order they were aligned.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};
use rand::Rng;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhlcBar {
    pub timestamp: DateTime<Utc>,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
}

impl OhlcBar {
    pub fn flat(timestamp: DateTime<Utc>, price: f64) -> Self {
        Self {
            timestamp,
            open: price,
            high: price,
            low: price,
            close: price,
        }
    }

    /// `low <= open, close <= high` with strictly positive prices.
    pub fn check(&self) -> std::result::Result<(), String> {
        let p = [self.open, self.high, self.low, self.close];
        if p.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(format!("non-positive price in {p:?}"));
        }
        if self.high < self.low {
            return Err(format!("high {} below low {}", self.high, self.low));
        }
        if self.open < self.low || self.open > self.high {
            return Err(format!("open {} outside [{}, {}]", self.open, self.low, self.high));
        }
        if self.close < self.low || self.close > self.high {
            return Err(format!("close {} outside [{}, {}]", self.close, self.low, self.high));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetSeries {
    pub asset: String,
    pub bars: Vec<OhlcBar>,
}

impl AssetSeries {
    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }
}

/// A rejected input row (1-based data row number, header excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub row: usize,
    pub reason: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.reason)
    }
}

/// Column names for [`ingest_csv`].
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub timestamp: String,
    pub asset: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            asset: "asset".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    /// One series per asset name, bars sorted by timestamp.
    pub series: BTreeMap<String, AssetSeries>,
    pub rejected: Vec<RowError>,
}

/// Parses an ISO-8601 timestamp: RFC 3339, a naive date-time taken as UTC, or
/// a plain date at midnight UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc())
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Ingested> {
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    ingest_reader(file, schema)
}

/// Reads `timestamp,asset,open,high,low,close` rows. Unparsable timestamps
/// and non-positive prices are hard errors; rows violating the OHLC ordering
/// or duplicating an `(asset, timestamp)` pair are dropped and listed in
/// [`Ingested::rejected`].
pub fn ingest_reader<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CoreError::MissingColumn(name.to_string()))
    };
    let (ct, ca) = (col(&schema.timestamp)?, col(&schema.asset)?);
    let (co, ch, cl, cc) = (col(&schema.open)?, col(&schema.high)?, col(&schema.low)?, col(&schema.close)?);

    let mut by_asset: BTreeMap<String, BTreeMap<DateTime<Utc>, OhlcBar>> = BTreeMap::new();
    let mut rejected = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let ts = parse_timestamp(field(ct)).ok_or_else(|| {
            CoreError::BadRow(RowError {
                row,
                reason: format!("unparsable timestamp `{}`", field(ct)),
            })
        })?;
        let price = |c: usize, what: &str| -> Result<f64> {
            let v: f64 = field(c).parse().map_err(|_| {
                CoreError::BadRow(RowError {
                    row,
                    reason: format!("unparsable {what} `{}`", field(c)),
                })
            })?;
            if !(v > 0.0) || !v.is_finite() {
                return Err(CoreError::BadRow(RowError {
                    row,
                    reason: format!("non-positive {what} {v}"),
                }));
            }
            Ok(v)
        };
        let bar = OhlcBar {
            timestamp: ts,
            open: price(co, "open")?,
            high: price(ch, "high")?,
            low: price(cl, "low")?,
            close: price(cc, "close")?,
        };
        if let Err(reason) = bar.check() {
            rejected.push(RowError { row, reason });
            continue;
        }
        let asset = field(ca).to_string();
        if asset.is_empty() {
            rejected.push(RowError {
                row,
                reason: "empty asset name".into(),
            });
            continue;
        }
        let slot = by_asset.entry(asset.clone()).or_default();
        if slot.contains_key(&ts) {
            rejected.push(RowError {
                row,
                reason: format!("duplicate timestamp for `{asset}`"),
            });
            continue;
        }
        slot.insert(ts, bar);
    }
    let series = by_asset
        .into_iter()
        .map(|(asset, bars)| {
            let s = AssetSeries {
                asset: asset.clone(),
                bars: bars.into_values().collect(),
            };
            (asset, s)
        })
        .collect();
    Ok(Ingested { series, rejected })
}

/// Merges `factor` consecutive bars into one; a trailing partial group is
/// dropped.
pub fn aggregate(series: &AssetSeries, factor: usize) -> Result<AssetSeries> {
    if series.is_empty() {
        return Err(CoreError::InsufficientData("empty series".into()));
    }
    if factor == 0 {
        return Err(CoreError::Invalid("aggregation factor must be >= 1".into()));
    }
    if series.len() < factor {
        return Err(CoreError::InsufficientData(format!(
            "{} bars cannot form a group of {factor}",
            series.len()
        )));
    }
    let bars = series
        .bars
        .chunks_exact(factor)
        .map(|g| OhlcBar {
            timestamp: g[0].timestamp,
            open: g[0].open,
            high: g.iter().map(|b| b.high).fold(f64::NEG_INFINITY, f64::max),
            low: g.iter().map(|b| b.low).fold(f64::INFINITY, f64::min),
            close: g[factor - 1].close,
        })
        .collect();
    Ok(AssetSeries {
        asset: series.asset.clone(),
        bars,
    })
}

/// `u = p_t / p_prev` with `u[0] = 1` for cash.
pub fn price_relative(p_t: &[f64], p_prev: &[f64]) -> Result<Vec<f64>> {
    if p_t.len() != p_prev.len() || p_t.is_empty() {
        return Err(CoreError::Invalid(format!(
            "price vectors of length {} and {}",
            p_t.len(),
            p_prev.len()
        )));
    }
    let mut u = Vec::with_capacity(p_t.len());
    u.push(1.0);
    for (a, b) in p_t.iter().zip(p_prev).skip(1) {
        if !(*b > 0.0) || !(*a > 0.0) {
            return Err(CoreError::Invalid(format!("non-positive price {b} or {a}")));
        }
        u.push(a / b);
    }
    Ok(u)
}

/// Close-to-close percentage changes `(p_t - p_{t-1}) / p_{t-1}`.
pub fn pct_change(closes: &[f64]) -> Result<Vec<f64>> {
    if closes.len() < 2 {
        return Err(CoreError::InsufficientData("pct_change needs >= 2 prices".into()));
    }
    Ok(closes.windows(2).map(|w| (w[1] - w[0]) / w[0]).collect())
}

/// Prices on a common timestamp grid. Vectors indexed `[t][asset]` include
/// the cash asset at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketData {
    pub timestamps: Vec<DateTime<Utc>>,
    /// Risky asset names (cash excluded).
    pub assets: Vec<String>,
    pub open: Vec<Vec<f64>>,
    pub high: Vec<Vec<f64>>,
    pub low: Vec<Vec<f64>>,
    pub close: Vec<Vec<f64>>,
    /// Market-index closes, when an index series was supplied.
    pub index: Option<Vec<f64>>,
    pub index_name: Option<String>,
}

impl MarketData {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Number of risky assets `m`.
    pub fn num_risky(&self) -> usize {
        self.assets.len()
    }

    /// Assembles an aligned dataset. `tradable` picks and orders the risky
    /// assets; `index` names the optional market-index series. A missing bar
    /// is forward-filled flat at the previous close; timestamps before every
    /// asset has produced its first bar are dropped.
    pub fn align(
        series: &BTreeMap<String, AssetSeries>,
        tradable: &[String],
        index: Option<&str>,
    ) -> Result<Self> {
        if tradable.is_empty() {
            return Err(CoreError::Config("at least one risky asset is required".into()));
        }
        let mut names: Vec<&str> = tradable.iter().map(String::as_str).collect();
        if let Some(ix) = index {
            if tradable.iter().any(|t| t == ix) {
                return Err(CoreError::Config(format!("index `{ix}` is also listed as tradable")));
            }
            names.push(ix);
        }
        let mut grid = BTreeSet::new();
        for name in &names {
            let s = series
                .get(*name)
                .ok_or_else(|| CoreError::Config(format!("no data for asset `{name}`")))?;
            grid.extend(s.bars.iter().map(|b| b.timestamp));
        }
        let start = names
            .iter()
            .filter_map(|n| series[*n].bars.first().map(|b| b.timestamp))
            .max()
            .ok_or_else(|| CoreError::InsufficientData("empty series".into()))?;
        let timestamps: Vec<_> = grid.into_iter().filter(|t| *t >= start).collect();

        let mut filled: Vec<Vec<OhlcBar>> = Vec::with_capacity(names.len());
        for name in &names {
            let bars = &series[*name].bars;
            let mut out = Vec::with_capacity(timestamps.len());
            let mut j = 0;
            let mut last: Option<OhlcBar> = None;
            for &t in &timestamps {
                while j < bars.len() && bars[j].timestamp < t {
                    last = Some(bars[j]);
                    j += 1;
                }
                if j < bars.len() && bars[j].timestamp == t {
                    last = Some(bars[j]);
                    out.push(bars[j]);
                    j += 1;
                } else {
                    let prev = last.expect("grid starts after every first bar");
                    out.push(OhlcBar::flat(t, prev.close));
                }
            }
            filled.push(out);
        }

        let m = tradable.len();
        let row = |t: usize, f: fn(&OhlcBar) -> f64| -> Vec<f64> {
            std::iter::once(1.0)
                .chain((0..m).map(|i| f(&filled[i][t])))
                .collect()
        };
        let n = timestamps.len();
        let data = MarketData {
            open: (0..n).map(|t| row(t, |b| b.open)).collect(),
            high: (0..n).map(|t| row(t, |b| b.high)).collect(),
            low: (0..n).map(|t| row(t, |b| b.low)).collect(),
            close: (0..n).map(|t| row(t, |b| b.close)).collect(),
            index: index.map(|_| filled[m].iter().map(|b| b.close).collect()),
            index_name: index.map(str::to_string),
            assets: tradable.to_vec(),
            timestamps,
        };
        Ok(data)
    }

    /// Bars `range.start..range.end` as an independent dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<MarketData> {
        if start > end || end > self.len() {
            return Err(CoreError::Invalid(format!(
                "slice {start}..{end} outside 0..{}",
                self.len()
            )));
        }
        Ok(MarketData {
            timestamps: self.timestamps[start..end].to_vec(),
            assets: self.assets.clone(),
            open: self.open[start..end].to_vec(),
            high: self.high[start..end].to_vec(),
            low: self.low[start..end].to_vec(),
            close: self.close[start..end].to_vec(),
            index: self.index.as_ref().map(|ix| ix[start..end].to_vec()),
            index_name: self.index_name.clone(),
        })
    }

    /// Indices of bars with `from <= timestamp < to`.
    pub fn range_by_time(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> (usize, usize) {
        let a = self.timestamps.partition_point(|t| *t < from);
        let b = self.timestamps.partition_point(|t| *t < to);
        (a, b)
    }

    /// Prepends bars before the first timestamp (used for synthetic warmup
    /// data). Timestamps of prepended bars step back one second each so the
    /// grid stays strictly increasing.
    pub fn prepend(&mut self, other: MarketData) -> Result<()> {
        if other.assets != self.assets {
            return Err(CoreError::Invalid("prepended data has different assets".into()));
        }
        let first = self.timestamps.first().copied().unwrap_or_default();
        let n = other.len();
        let ts = (0..n).map(|k| first - chrono::Duration::seconds((n - k) as i64));
        self.timestamps.splice(0..0, ts);
        self.open.splice(0..0, other.open);
        self.high.splice(0..0, other.high);
        self.low.splice(0..0, other.low);
        self.close.splice(0..0, other.close);
        if let Some(ix) = &mut self.index {
            let v = ix[0];
            let pre = other.index.unwrap_or_else(|| vec![v; n]);
            ix.splice(0..0, pre);
        }
        Ok(())
    }

    /// Price relative vector `u_t = close_t / close_{t-1}`.
    pub fn relative(&self, t: usize) -> Vec<f64> {
        price_relative(&self.close[t], &self.close[t - 1]).expect("aligned prices are positive")
    }

    /// Close, high and low percentage changes of every risky asset at bar
    /// `t`, laid out `[close_1..m, high_1..m, low_1..m]`. High and low are
    /// taken relative to the previous close.
    pub fn hlc_changes(&self, t: usize) -> Vec<f64> {
        let m = self.num_risky();
        let mut x = Vec::with_capacity(3 * m);
        for mat in [&self.close, &self.high, &self.low] {
            x.extend(mat[t][1..=m].iter().zip(&self.close[t - 1][1..=m]).map(|(v, p)| v / p - 1.0));
        }
        x
    }

    /// `index_t / index_{t-1}`, or 1 without an index series.
    pub fn index_ratio(&self, t: usize) -> f64 {
        match &self.index {
            Some(ix) if t > 0 => ix[t] / ix[t - 1],
            _ => 1.0,
        }
    }

    pub fn to_series(&self) -> BTreeMap<String, AssetSeries> {
        let mut out = BTreeMap::new();
        for (i, name) in self.assets.iter().enumerate() {
            let bars = (0..self.len())
                .map(|t| OhlcBar {
                    timestamp: self.timestamps[t],
                    open: self.open[t][i + 1],
                    high: self.high[t][i + 1],
                    low: self.low[t][i + 1],
                    close: self.close[t][i + 1],
                })
                .collect();
            out.insert(
                name.clone(),
                AssetSeries {
                    asset: name.clone(),
                    bars,
                },
            );
        }
        if let (Some(ix), Some(name)) = (&self.index, &self.index_name) {
            let bars = self
                .timestamps
                .iter()
                .zip(ix)
                .map(|(t, p)| OhlcBar::flat(*t, *p))
                .collect();
            out.insert(
                name.clone(),
                AssetSeries {
                    asset: name.clone(),
                    bars,
                },
            );
        }
        out
    }

    /// Writes the aligned dataset in the ingest schema, one row per
    /// `(timestamp, asset)`; the index series (if any) is written flat.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestamp", "asset", "open", "high", "low", "close"])?;
        for t in 0..self.len() {
            let ts = format_timestamp(&self.timestamps[t]);
            for (i, name) in self.assets.iter().enumerate() {
                let k = i + 1;
                w.write_record([
                    ts.as_str(),
                    name,
                    &self.open[t][k].to_string(),
                    &self.high[t][k].to_string(),
                    &self.low[t][k].to_string(),
                    &self.close[t][k].to_string(),
                ])?;
            }
            if let (Some(ix), Some(name)) = (&self.index, &self.index_name) {
                let p = ix[t].to_string();
                w.write_record([ts.as_str(), name, &p, &p, &p, &p])?;
            }
        }
        w.flush().map_err(|e| CoreError::io("csv output", e))?;
        Ok(())
    }
}

/// Close, high and low matrices (`(m+1) x k2`, row per asset) normalized by
/// the latest close of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceTensor {
    pub close: Vec<Vec<f64>>,
    pub high: Vec<Vec<f64>>,
    pub low: Vec<Vec<f64>>,
    pub k2: usize,
}

impl PriceTensor {
    /// Channel-major flattening for time step `j`: `[close rows, high rows,
    /// low rows]`, each of length `m + 1`.
    pub fn step_features(&self, j: usize) -> Vec<f64> {
        [&self.close, &self.high, &self.low]
            .iter()
            .flat_map(|mat| mat.iter().map(move |row| row[j]))
            .collect()
    }
}

pub fn build_price_tensor(data: &MarketData, t: usize, k2: usize) -> Result<PriceTensor> {
    if k2 == 0 || t + 1 < k2 || t >= data.len() {
        return Err(CoreError::InsufficientData(format!(
            "window of {k2} bars ending at {t} exceeds available history of {}",
            data.len()
        )));
    }
    let n = data.num_risky() + 1;
    let window = |mat: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let p = data.close[t][i];
                (t + 1 - k2..=t).map(|s| mat[s][i] / p).collect()
            })
            .collect()
    };
    Ok(PriceTensor {
        close: window(&data.close),
        high: window(&data.high),
        low: window(&data.low),
        k2,
    })
}

/// A window of `k2 + length` bars: `k2` bars of history followed by
/// `length` decision steps.
#[derive(Debug, Clone)]
pub struct EpisodeSlice {
    pub start: usize,
    pub length: usize,
    pub k2: usize,
    pub data: MarketData,
}

impl EpisodeSlice {
    /// Bar index of the first decision.
    pub fn first_decision(&self) -> usize {
        self.k2 - 1
    }
}

/// Uniformly random admissible episode of `length` steps.
pub fn sample_episode<R: Rng + ?Sized>(
    data: &MarketData,
    length: usize,
    k2: usize,
    rng: &mut R,
) -> Result<EpisodeSlice> {
    let need = length + k2;
    if data.len() < need || length == 0 || k2 == 0 {
        return Err(CoreError::InsufficientData(format!(
            "dataset of {} bars is shorter than episode {length} + window {k2}",
            data.len()
        )));
    }
    let start = rng.random_range(0..=data.len() - need);
    Ok(EpisodeSlice {
        start,
        length,
        k2,
        data: data.slice(start, start + need)?,
    })
}
