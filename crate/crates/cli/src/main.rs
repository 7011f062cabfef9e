//! `folio`: ingest data, train and backtest agents, and drive the individual
//! modules from the command line.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use folio_core::config::RunConfig;
use folio_core::greedy::{solve_greedy, GreedyProblem};
use folio_core::market::{ingest_csv, CsvSchema, MarketData};
use folio_core::ndybm::NdybmState;
use folio_core::orchestrator::{
    evaluate_phase, ipm_stream, load_agent, load_ipm, load_market, report_from_equity, run, split_data, state_spec,
    train_phase, write_report, TrainArtifacts,
};
use folio_core::rgan::{generate_episode, GanPair};
use folio_core::seed::module_rng;
use folio_nn::Checkpoint;

#[derive(Parser)]
#[command(name = "folio", version, about = "Model-based DDPG portfolio engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults describe a synthetic market.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long, default_value = "folio-out")]
    out: PathBuf,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a long-format OHLC CSV and write it aligned on a common grid.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Tradable assets, comma separated; default all but the index.
        #[arg(long, value_delimiter = ',')]
        assets: Vec<String>,
        #[arg(long)]
        index: Option<String>,
    },
    /// Train modules and the agent on the train range.
    Train(RunArgs),
    /// Evaluate a trained agent on the test range against CRP.
    Backtest {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding `agent.json` (and `ipm.json`); default `--out`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Train, evaluate and report in one go.
    Run(RunArgs),
    /// Sample synthetic HLC bars from a trained GAN checkpoint.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "asset")]
        asset: String,
        #[arg(long, default_value_t = 42)]
        bars: usize,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Stream OHLC bars through the IPM, emitting one-step predictions.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        input: PathBuf,
        /// Pretrained IPM; a fresh model learns online otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Solve the one-step greedy expert problem.
    Greedy {
        /// Price relatives including cash first, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        u: Vec<f64>,
        /// Current weights including cash first.
        #[arg(long, value_delimiter = ',', required = true)]
        w: Vec<f64>,
        #[arg(long, default_value_t = 0.002)]
        cost: f64,
    },
    /// Recompute metrics from an equity CSV.
    Report {
        #[arg(long)]
        equity: PathBuf,
        #[arg(long, default_value_t = 252.0)]
        periods_per_year: f64,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn ingest(input: &Path, output: &Path, assets: Vec<String>, index: Option<String>) -> Result<()> {
    let ing = ingest_csv(input, &CsvSchema::default())?;
    for r in &ing.rejected {
        log::warn!("dropped {r}");
    }
    let tradable = if assets.is_empty() {
        ing.series.keys().filter(|k| Some(k.as_str()) != index.as_deref()).cloned().collect()
    } else {
        assets
    };
    let data = MarketData::align(&ing.series, &tradable, index.as_deref())?;
    data.write_csv(File::create(output).with_context(|| format!("creating {}", output.display()))?)?;
    log::info!(
        "{} bars x {} assets written to {} ({} rows dropped)",
        data.len(),
        data.num_risky(),
        output.display(),
        ing.rejected.len()
    );
    Ok(())
}

fn backtest(args: &RunArgs, checkpoints: Option<&Path>) -> Result<()> {
    let cfg = args.load()?;
    let dir = checkpoints.unwrap_or(&args.out);
    let data = load_market(&cfg)?;
    let split = split_data(&data, &cfg)?;
    let spec = state_spec(&data, &cfg);
    let agent = load_agent(&dir.join("agent.json"), spec, &cfg).context("loading the agent checkpoint")?;
    let ipm = if cfg.modules.ipm {
        Some(load_ipm(&dir.join("ipm.json"), 3 * data.num_risky(), &cfg).context("loading the IPM checkpoint")?)
    } else {
        None
    };
    let eval = evaluate_phase(&agent, ipm, &split, &cfg)?;
    let artifacts = TrainArtifacts {
        modules: Vec::new(),
        checkpoints: Default::default(),
        training_log: String::new(),
    };
    let report = write_report(&eval, artifacts, &cfg, &args.out)?;
    print_json(&serde_json::json!({ "agent": report.agent, "crp": report.crp }))
}

fn generate(args: &RunArgs, checkpoint: &Path, asset: &str, bars: usize, out: &Option<PathBuf>) -> Result<()> {
    let cfg = args.load()?;
    let ck = Checkpoint::from_json(&fs::read_to_string(checkpoint).with_context(|| checkpoint.display().to_string())?)?;
    let mut rng = module_rng(cfg.seed, "generate");
    let pair = GanPair::from_checkpoint(asset, &cfg.gan, &ck, &mut rng)?;
    let ep = generate_episode(&[pair], bars, cfg.dam.fine_steps, cfg.dam.scale, &mut rng)?;
    let mut w = csv::Writer::from_writer(output(out)?);
    w.write_record(["bar", "close", "high", "low"])?;
    for (t, b) in ep.bars[0].iter().enumerate() {
        w.write_record([t.to_string(), b.close.to_string(), b.high.to_string(), b.low.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn predict(args: &RunArgs, input: &Path, checkpoint: Option<&Path>, out: &Option<PathBuf>) -> Result<()> {
    let cfg = args.load()?;
    let ing = ingest_csv(input, &CsvSchema::default())?;
    let names: Vec<String> = ing.series.keys().cloned().collect();
    let data = MarketData::align(&ing.series, &names, None)?;
    let units = 3 * data.num_risky();
    let mut ipm = match checkpoint {
        Some(p) => load_ipm(p, units, &cfg)?,
        None => NdybmState::new(units, cfg.ndybm.clone(), &mut module_rng(cfg.seed, "ipm"))?,
    };
    let mut w = csv::Writer::from_writer(output(out)?);
    let mut header = vec!["timestamp".to_string()];
    for kind in ["close", "high", "low"] {
        header.extend(data.assets.iter().map(|a| format!("{a}.{kind}")));
    }
    w.write_record(&header)?;
    // Row t holds the prediction for bar t + 1 made after observing bar t.
    for (k, x) in ipm_stream(&data).iter().enumerate() {
        ipm.update(x)?;
        let mut row = vec![folio_core::market::format_timestamp(&data.timestamps[k + 1])];
        row.extend(ipm.predict()?.to_flat().iter().map(|v| (v / 100.0).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest {
            input,
            output,
            assets,
            index,
        } => ingest(&input, &output, assets, index),
        Command::Train(args) => {
            let cfg = args.load()?;
            let data = load_market(&cfg)?;
            let split = split_data(&data, &cfg)?;
            let (_, _, artifacts) = train_phase(&split, &cfg, &args.out)?;
            print_json(&artifacts)
        }
        Command::Backtest { run, checkpoints } => backtest(&run, checkpoints.as_deref()),
        Command::Run(args) => {
            let cfg = args.load()?;
            let report = run(&cfg, &args.out)?;
            print_json(&serde_json::json!({ "agent": report.agent, "crp": report.crp, "modules": report.modules }))
        }
        Command::Generate {
            run,
            checkpoint,
            asset,
            bars,
            output,
        } => generate(&run, &checkpoint, &asset, bars, &output),
        Command::Predict {
            run,
            input,
            checkpoint,
            output,
        } => predict(&run, &input, checkpoint.as_deref(), &output),
        Command::Greedy { u, w, cost } => {
            if u.len() != w.len() {
                bail!("--u and --w need the same number of entries");
            }
            let expert = solve_greedy(&GreedyProblem { u, w_prev: w, cost })?;
            print_json(&expert)
        }
        Command::Report {
            equity,
            periods_per_year,
        } => {
            let f = File::open(&equity).with_context(|| format!("opening {}", equity.display()))?;
            print_json(&report_from_equity(f, periods_per_year)?)
        }
    }
}
