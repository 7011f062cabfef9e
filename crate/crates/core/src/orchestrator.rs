//! End-to-end runs: split, pretrain modules on the train range, train the
//! agent, evaluate it frozen on the test range against CRP, write artifacts.
//!
//! Every artifact path in a report is relative to the output directory, so
//! two runs of one config produce identical bytes wherever they are written.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    train_ddpg, train_rdpg, write_log_csv, Agent, AgentPolicy, Dam, Modules, RiskKind, StateSpec, TrainObserver,
    Trained, IPM_UNITS,
};
use crate::backtest::{run_backtest, run_crp, BacktestResult};
use crate::config::{RunConfig, Variant};
use crate::error::{CoreError, Result};
use crate::market::{ingest_csv, pct_change, CsvSchema, MarketData};
use crate::ndybm::{pretrain, NdybmState};
use crate::rgan::{train_rgan, GanPair};
use crate::risk::MetricsReport;
use crate::seed::module_rng;

/// Loads the configured CSV, or generates the synthetic market.
pub fn load_market(cfg: &RunConfig) -> Result<MarketData> {
    match &cfg.data.path {
        Some(path) => {
            let ing = ingest_csv(path, &CsvSchema::default())?;
            for r in &ing.rejected {
                log::warn!("{}: dropped {r}", path.display());
            }
            let tradable: Vec<String> = if cfg.data.assets.is_empty() {
                ing.series
                    .keys()
                    .filter(|k| Some(k.as_str()) != cfg.data.index.as_deref())
                    .cloned()
                    .collect()
            } else {
                cfg.data.assets.clone()
            };
            MarketData::align(&ing.series, &tradable, cfg.data.index.as_deref())
        }
        None => Ok(cfg
            .data
            .synthetic
            .generate(&mut ChaCha8Rng::seed_from_u64(cfg.data.synthetic_seed))),
    }
}

/// Train data and the test window. The test window starts with `k2 - 1`
/// bars of history (never fewer than reach back into the train range) so
/// the first test decision has a full price tensor.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: MarketData,
    pub test: MarketData,
    /// First decision bar in `test`.
    pub first_decision: usize,
    /// Last bar of `test` that belongs to the train range; the IPM has seen
    /// everything up to it.
    pub seen: usize,
}

pub fn split_data(data: &MarketData, cfg: &RunConfig) -> Result<Split> {
    cfg.split.validate()?;
    let n = data.len();
    let k2 = cfg.agent.k2;
    // Half-open bar ranges.
    let (train, test) = if cfg.split.uses_dates() {
        let b = cfg.split.bounds()?;
        let lo = |t: Option<chrono::DateTime<chrono::Utc>>, default: usize| {
            t.map_or(default, |t| data.timestamps.partition_point(|x| *x < t))
        };
        (
            (lo(b.train.0, 0), lo(b.train.1, n)),
            (lo(b.test.0, n), lo(b.test.1, n)),
        )
    } else {
        let cut = (n as f64 * cfg.split.train_fraction).floor() as usize;
        ((0, cut), (cut, n))
    };
    if train.1 <= train.0 || train.1 - train.0 < k2 + 1 {
        return Err(CoreError::InsufficientData(format!(
            "train range has {} bars, need more than k2 = {k2}",
            train.1.saturating_sub(train.0)
        )));
    }
    if test.1 <= test.0 + 1 || test.0 < train.1 {
        return Err(CoreError::InsufficientData("test range needs at least two bars after the train range".into()));
    }
    let last_train = train.1 - 1;
    let start = test.0.saturating_sub(k2 - 1).min(last_train);
    if test.0 - start < k2 - 1 {
        return Err(CoreError::InsufficientData("not enough history before the test range".into()));
    }
    Ok(Split {
        train: data.slice(train.0, train.1)?,
        test: data.slice(start, test.1)?,
        first_decision: test.0 - start,
        seen: last_train - start,
    })
}

/// IPM inputs of bars `1..len` in percent.
pub fn ipm_stream(data: &MarketData) -> Vec<Vec<f64>> {
    (1..data.len())
        .map(|t| data.hlc_changes(t).into_iter().map(|v| v * IPM_UNITS).collect())
        .collect()
}

/// A fresh IPM pretrained on the whole train range.
pub fn pretrain_ipm(train: &MarketData, cfg: &RunConfig) -> Result<NdybmState> {
    let mut rng = module_rng(cfg.seed, "ipm");
    let mut ipm = NdybmState::new(3 * train.num_risky(), cfg.ndybm.clone(), &mut rng)?;
    pretrain(&mut ipm, &ipm_stream(train), &mut rng)?;
    Ok(ipm)
}

/// One generator per asset on its close-to-close changes, trained
/// concurrently with a seed stream per asset.
pub fn train_gans(train: &MarketData, cfg: &RunConfig) -> Result<Vec<GanPair>> {
    let jobs: Vec<(String, Vec<f64>)> = train
        .assets
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let closes: Vec<f64> = train.close.iter().map(|row| row[i + 1]).collect();
            Ok((name.clone(), pct_change(&closes)?))
        })
        .collect::<Result<_>>()?;
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(name, series)| {
                s.spawn(move || {
                    let mut rng = module_rng(cfg.seed, &format!("dam.gan.{name}"));
                    train_rgan(name, series, &cfg.gan, &mut rng, |_| {})
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| CoreError::Invalid("GAN training thread panicked".into()))?)
            .collect()
    })
}

/// Pretrained modules, plus a copy of the IPM as it stood at the end of the
/// train range for the evaluation phase.
pub struct Prepared {
    pub modules: Modules,
    pub eval_ipm: Option<NdybmState>,
}

pub fn prepare_modules(train: &MarketData, cfg: &RunConfig) -> Result<Prepared> {
    let ipm = if cfg.modules.ipm {
        info!("pretraining IPM on {} bars", train.len());
        Some(pretrain_ipm(train, cfg)?)
    } else {
        None
    };
    let dam = if cfg.modules.dam {
        info!("training {} GANs", train.num_risky());
        Some(Dam {
            pairs: train_gans(train, cfg)?,
            horizon: cfg.dam.horizon,
            fine_steps: cfg.dam.fine_steps,
            scale: cfg.dam.scale,
            rng: module_rng(cfg.seed, "dam.augment"),
        })
    } else {
        None
    };
    Ok(Prepared {
        eval_ipm: ipm.clone(),
        modules: Modules {
            ipm,
            dam,
            bcm: cfg.modules.bcm,
        },
    })
}

pub fn train_agent<O: TrainObserver + ?Sized>(
    train: &MarketData,
    modules: &mut Modules,
    cfg: &RunConfig,
    obs: &mut O,
) -> Result<Trained> {
    let mut rng = module_rng(cfg.seed, "agent");
    let cost = cfg.execution.fee_rate;
    info!(
        "training {:?} for {} episodes of {} steps",
        cfg.variant, cfg.agent.episodes, cfg.agent.episode_length
    );
    match cfg.variant {
        Variant::Ddpg => train_ddpg(train, modules, &cfg.agent, cost, &mut rng, obs),
        Variant::RdpgDsr => train_rdpg(train, modules, &cfg.agent, RiskKind::Dsr, cost, &mut rng, obs),
        Variant::RdpgD3r => train_rdpg(train, modules, &cfg.agent, RiskKind::D3r, cost, &mut rng, obs),
    }
}

pub fn state_spec(data: &MarketData, cfg: &RunConfig) -> StateSpec {
    StateSpec {
        assets: data.num_risky(),
        k2: cfg.agent.k2,
        ipm: cfg.modules.ipm,
        feature_scale: cfg.agent.feature_scale,
    }
}

/// Frozen-agent backtest over the test window; the IPM keeps learning.
pub fn evaluate(agent: &Agent, ipm: Option<NdybmState>, split: &Split, cfg: &RunConfig) -> Result<BacktestResult> {
    if agent.spec.ipm != ipm.is_some() {
        return Err(CoreError::Invalid("agent and IPM presence disagree".into()));
    }
    let mut policy = AgentPolicy {
        agent,
        ipm,
        seen: split.seen,
    };
    run_backtest(&mut policy, &split.test, split.first_decision, &cfg.execution)
}

/// Rebuilds an agent from its checkpoint file.
pub fn load_agent(path: &Path, spec: StateSpec, cfg: &RunConfig) -> Result<Agent> {
    let ck = folio_nn::Checkpoint::from_json(&read(path)?)?;
    Agent::from_checkpoint(spec, cfg.agent.clone(), &ck, &mut module_rng(cfg.seed, "agent.load"))
}

pub fn load_ipm(path: &Path, units: usize, cfg: &RunConfig) -> Result<NdybmState> {
    let ck = folio_nn::Checkpoint::from_json(&read(path)?)?;
    let mut ipm = NdybmState::new(units, cfg.ndybm.clone(), &mut module_rng(cfg.seed, "ipm"))?;
    ipm.load_checkpoint(&ck)?;
    Ok(ipm)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CoreError::io(path, e))
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CoreError::io(&path, e))?;
    Ok(name.to_string())
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CoreError::Invalid(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Artifacts of the training phase, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArtifacts {
    pub modules: Vec<String>,
    pub checkpoints: BTreeMap<String, String>,
    pub training_log: String,
}

/// Trains per the config and writes checkpoints and the training log.
/// Returns the agent and the evaluation-phase IPM alongside the artifacts.
pub fn train_phase(
    split: &Split,
    cfg: &RunConfig,
    out: &Path,
) -> Result<(Agent, Option<NdybmState>, TrainArtifacts)> {
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let mut prepared = prepare_modules(&split.train, cfg)?;
    let modules: Vec<String> = prepared.modules.names().into_iter().map(String::from).collect();
    let mut checkpoints = BTreeMap::new();
    if let Some(ipm) = &prepared.eval_ipm {
        checkpoints.insert("ipm".into(), write(out, "ipm.json", ipm.to_checkpoint()?.to_json()?.as_bytes())?);
    }
    if let Some(dam) = &prepared.modules.dam {
        for pair in &dam.pairs {
            let name = format!("gan_{}.json", pair.asset);
            checkpoints.insert(format!("gan.{}", pair.asset), write(out, &name, pair.to_checkpoint().to_json()?.as_bytes())?);
        }
    }
    let trained = train_agent(&split.train, &mut prepared.modules, cfg, &mut ())?;
    checkpoints.insert("agent".into(), write(out, "agent.json", trained.agent.to_checkpoint().to_json()?.as_bytes())?);
    let mut log_bytes = Vec::new();
    write_log_csv(&trained.log, &mut log_bytes)?;
    let training_log = write(out, "training_log.csv", &log_bytes)?;
    Ok((
        trained.agent,
        prepared.eval_ipm,
        TrainArtifacts {
            modules,
            checkpoints,
            training_log,
        },
    ))
}

/// Agent and CRP results on the test window.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub agent: BacktestResult,
    pub crp: BacktestResult,
}

pub fn evaluate_phase(agent: &Agent, ipm: Option<NdybmState>, split: &Split, cfg: &RunConfig) -> Result<Evaluation> {
    Ok(Evaluation {
        agent: evaluate(agent, ipm, split, cfg)?,
        crp: run_crp(&split.test, split.first_decision, &cfg.execution)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub variant: Variant,
    /// Modules actually constructed for training.
    pub modules: Vec<String>,
    pub agent: MetricsReport,
    pub crp: MetricsReport,
    pub checkpoints: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
    pub config: RunConfig,
}

/// Writes equity curves for both policies and the JSON report.
pub fn write_report(eval: &Evaluation, train: TrainArtifacts, cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let mut files = BTreeMap::new();
    for (key, result) in [("agent_equity", &eval.agent), ("crp_equity", &eval.crp)] {
        let mut bytes = Vec::new();
        result.write_equity_csv(&mut bytes)?;
        files.insert(key.to_string(), write(out, &format!("{key}.csv"), &bytes)?);
    }
    files.insert("training_log".into(), train.training_log);
    let report = RunReport {
        seed: cfg.seed,
        variant: cfg.variant,
        modules: train.modules,
        agent: eval.agent.metrics.clone(),
        crp: eval.crp.metrics.clone(),
        checkpoints: train.checkpoints,
        files,
        config: cfg.clone(),
    };
    write(out, "report.json", &json(&report)?)?;
    Ok(report)
}

/// The full pipeline. Artifacts land in `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let data = load_market(cfg)?;
    let split = split_data(&data, cfg)?;
    info!(
        "{} assets; train {} bars, test {} decisions",
        data.num_risky(),
        split.train.len(),
        split.test.len() - split.first_decision - 1
    );
    let (agent, ipm, artifacts) = train_phase(&split, cfg, out)?;
    let eval = evaluate_phase(&agent, ipm, &split, cfg)?;
    write_report(&eval, artifacts, cfg, out)
}

/// Equity values and per-step rewards from an equity CSV written by
/// [`BacktestResult::write_equity_csv`].
pub fn read_equity_csv<R: std::io::Read>(reader: R) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rd = csv::Reader::from_reader(reader);
    let (mut equity, mut rewards) = (Vec::new(), Vec::new());
    for (k, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CoreError::Invalid(format!("equity row {}: bad column {i}", k + 1)))
        };
        equity.push(num(1)?);
        if k > 0 {
            rewards.push(num(2)?);
        }
    }
    if equity.is_empty() {
        return Err(CoreError::InsufficientData("empty equity csv".into()));
    }
    Ok((equity, rewards))
}

/// Metrics recomputed from an equity CSV.
pub fn report_from_equity<R: std::io::Read>(reader: R, periods_per_year: f64) -> Result<MetricsReport> {
    let (equity, rewards) = read_equity_csv(reader)?;
    MetricsReport::compute(&equity, &rewards, periods_per_year)
}
