//! Ingestion, aggregation and observation tensors against recomputation
//! oracles.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use folio_core::market::{
    aggregate, build_price_tensor, ingest_reader, pct_change, price_relative, sample_episode, AssetSeries,
    CsvSchema, MarketData, OhlcBar,
};
use folio_core::synthetic::SyntheticMarket;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_series(rng: &mut ChaCha8Rng, n: usize) -> AssetSeries {
    let t0 = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap().and_utc();
    let mut p = 100.0f64;
    let bars = (0..n)
        .map(|k| {
            let open = p;
            let close = p * rng.random_range(0.95..1.05);
            let high = open.max(close) * rng.random_range(1.0..1.02);
            let low = open.min(close) * rng.random_range(0.98..1.0);
            p = close;
            OhlcBar {
                timestamp: t0 + Duration::days(k as i64),
                open,
                high,
                low,
                close,
            }
        })
        .collect();
    AssetSeries {
        asset: "A".into(),
        bars,
    }
}

#[test]
fn shuffled_rows_group_and_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rows = Vec::new();
    let mut oracle: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for name in ["AAA", "BBB", "CCC"] {
        let mut s = random_series(&mut rng, 100);
        s.asset = name.into();
        for b in &s.bars {
            let ts = b.timestamp.format("%Y-%m-%d").to_string();
            rows.push(format!("{ts},{name},{},{},{},{}", b.open, b.high, b.low, b.close));
            oracle.entry(name.into()).or_default().push(ts);
        }
    }
    rows.shuffle(&mut rng);
    let csv = format!("timestamp,asset,open,high,low,close\n{}\n", rows.join("\n"));
    let got = ingest_reader(csv.as_bytes(), &CsvSchema::default()).unwrap();
    assert!(got.rejected.is_empty());
    assert_eq!(got.series.len(), 3);
    for (name, mut ts) in oracle {
        ts.sort();
        let s = &got.series[&name];
        let seen: Vec<String> = s.bars.iter().map(|b| b.timestamp.format("%Y-%m-%d").to_string()).collect();
        assert_eq!(seen, ts);
    }
}

#[test]
fn aggregate_matches_group_by() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_series(&mut rng, 25);
    let a = aggregate(&s, 10).unwrap();
    assert_eq!(a.bars.len(), 2);
    for (g, bar) in a.bars.iter().enumerate() {
        let grp = &s.bars[g * 10..g * 10 + 10];
        assert_eq!(bar.open, grp[0].open);
        assert_eq!(bar.close, grp[9].close);
        assert_eq!(bar.high, grp.iter().map(|b| b.high).fold(0.0, f64::max));
        assert_eq!(bar.low, grp.iter().map(|b| b.low).fold(f64::INFINITY, f64::min));
        assert_eq!(bar.timestamp, grp[0].timestamp);
    }
}

#[test]
fn relative_and_pct_change_reconstruct() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let prev: Vec<f64> = std::iter::once(1.0).chain((0..5).map(|_| rng.random_range(0.1..500.0))).collect();
        let now: Vec<f64> = std::iter::once(1.0).chain((0..5).map(|_| rng.random_range(0.1..500.0))).collect();
        let u = price_relative(&now, &prev).unwrap();
        for i in 0..6 {
            assert!((u[i] * prev[i] - now[i]).abs() <= 1e-12 * now[i]);
        }
        assert!(price_relative(&prev, &prev).unwrap().iter().all(|v| *v == 1.0));
    }
    let closes = random_series(&mut rng, 200).closes();
    let h = pct_change(&closes).unwrap();
    let mut p = closes[0];
    for (k, r) in h.iter().enumerate() {
        p *= 1.0 + r;
        assert!((p - closes[k + 1]).abs() <= 1e-12 * closes[k + 1]);
    }
}

fn one_asset(closes: &[f64], highs: &[f64], lows: &[f64]) -> MarketData {
    let n = closes.len();
    let t0 = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap().and_utc();
    MarketData {
        timestamps: (0..n).map(|k| t0 + Duration::days(k as i64)).collect(),
        assets: vec!["A".into()],
        open: closes.iter().map(|c| vec![1.0, *c]).collect(),
        high: highs.iter().map(|c| vec![1.0, *c]).collect(),
        low: lows.iter().map(|c| vec![1.0, *c]).collect(),
        close: closes.iter().map(|c| vec![1.0, *c]).collect(),
        index: None,
        index_name: None,
    }
}

#[test]
fn tensor_hand_example() {
    let d = one_asset(&[100.0, 110.0], &[105.0, 112.0], &[95.0, 108.0]);
    let pt = build_price_tensor(&d, 1, 2).unwrap();
    assert_eq!(pt.close[1], vec![100.0 / 110.0, 1.0]);
    assert_eq!(pt.high[1], vec![105.0 / 110.0, 112.0 / 110.0]);
    assert_eq!(pt.low[1], vec![95.0 / 110.0, 108.0 / 110.0]);
    assert!(pt.close[0].iter().chain(&pt.high[0]).chain(&pt.low[0]).all(|v| *v == 1.0));
    assert_eq!(
        pt.step_features(1),
        vec![1.0, 1.0, 1.0, 112.0 / 110.0, 1.0, 108.0 / 110.0]
    );
    let flat = one_asset(&[7.0; 5], &[7.0; 5], &[7.0; 5]);
    let pt = build_price_tensor(&flat, 4, 5).unwrap();
    assert!(pt.close.iter().chain(&pt.high).chain(&pt.low).flatten().all(|v| *v == 1.0));
    assert!(build_price_tensor(&flat, 3, 5).is_err());
}

#[test]
fn episode_sampling() {
    let d = SyntheticMarket {
        assets: 2,
        bars: 14,
        ..Default::default()
    }
    .generate(&mut ChaCha8Rng::seed_from_u64(4));
    // Forced choice.
    let e = sample_episode(&d, 10, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(e.start, 0);
    assert_eq!(e.data.len(), 14);
    assert!(sample_episode(&d, 11, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    // Determinism with fresh generators.
    let a = sample_episode(&d, 6, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = sample_episode(&d, 6, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!((a.start, a.data), (b.start, b.data));
    // 14 bars, need 10: five admissible starts.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 5];
    for _ in 0..10_000 {
        counts[sample_episode(&d, 6, 4, &mut rng).unwrap().start] += 1;
    }
    for c in counts {
        assert!((c as f64 / 2000.0 - 1.0).abs() < 0.05, "{counts:?}");
    }
}

#[test]
fn align_forward_fills_and_drops_leading_bars() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_series(&mut rng, 10);
    let mut b = random_series(&mut rng, 10);
    b.asset = "B".into();
    b.bars.remove(5);
    b.bars.remove(0);
    let mut series = BTreeMap::new();
    series.insert("A".to_string(), a.clone());
    series.insert("B".to_string(), b.clone());
    let d = MarketData::align(&series, &["A".into(), "B".into()], None).unwrap();
    assert_eq!(d.len(), 9);
    assert_eq!(d.timestamps[0], a.bars[1].timestamp);
    // Bar 5 of B is missing: forward-filled flat at B's previous close.
    let prev = b.bars[3].close;
    assert_eq!(d.open[4][2], prev);
    assert_eq!(d.close[4][2], prev);
    assert_eq!(d.high[4][2], prev);
    assert!(d.close.iter().all(|row| row[0] == 1.0));
}

#[test]
fn csv_round_trip() {
    let d = SyntheticMarket {
        assets: 3,
        bars: 30,
        ..Default::default()
    }
    .generate(&mut ChaCha8Rng::seed_from_u64(7));
    let mut buf = Vec::new();
    d.write_csv(&mut buf).unwrap();
    let got = ingest_reader(buf.as_slice(), &CsvSchema::default()).unwrap();
    assert!(got.rejected.is_empty());
    let back = MarketData::align(&got.series, &d.assets, d.index_name.as_deref()).unwrap();
    assert_eq!(back, d);
}

#[test]
fn synthetic_bars_are_valid() {
    let d = SyntheticMarket::default().generate(&mut ChaCha8Rng::seed_from_u64(8));
    assert_eq!((d.len(), d.num_risky()), (3000, 8));
    for t in 0..d.len() {
        for i in 1..=8 {
            let b = OhlcBar {
                timestamp: d.timestamps[t],
                open: d.open[t][i],
                high: d.high[t][i],
                low: d.low[t][i],
                close: d.close[t][i],
            };
            b.check().unwrap();
        }
    }
}

proptest! {
    #[test]
    fn aggregate_associative(seed in 0u64..500, a in 1usize..5, b in 1usize..5, groups in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_series(&mut rng, a * b * groups);
        let twice = aggregate(&aggregate(&s, a).unwrap(), b).unwrap();
        prop_assert_eq!(twice, aggregate(&s, a * b).unwrap());
    }

    #[test]
    fn tensor_invariants(seed in 0u64..200, k2 in 1usize..12) {
        let d = SyntheticMarket { assets: 3, bars: 40, ..Default::default() }
            .generate(&mut ChaCha8Rng::seed_from_u64(seed));
        let t = ChaCha8Rng::seed_from_u64(seed + 1).random_range(k2 - 1..40);
        let pt = build_price_tensor(&d, t, k2).unwrap();
        for i in 0..4 {
            prop_assert_eq!(pt.close[i][k2 - 1], 1.0);
            for j in 0..k2 {
                prop_assert!(pt.high[i][j] >= pt.close[i][j] && pt.close[i][j] >= pt.low[i][j]);
                if i == 0 {
                    prop_assert!(pt.close[0][j] == 1.0 && pt.high[0][j] == 1.0 && pt.low[0][j] == 1.0);
                }
            }
        }
    }
}
