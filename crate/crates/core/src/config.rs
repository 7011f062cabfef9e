//! Run configuration: one TOML file addressing every module's settings.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::backtest::ExecutionConfig;
use crate::error::{CoreError, Result};
use crate::market::parse_timestamp;
use crate::ndybm::NdybmConfig;
use crate::rgan::{FineScale, GanConfig};
use crate::synthetic::SyntheticMarket;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format OHLC CSV. Without it a synthetic market is generated.
    pub path: Option<PathBuf>,
    /// Tradable assets in order; empty means every series except the index.
    pub assets: Vec<String>,
    /// Name of the market-index series in the CSV.
    pub index: Option<String>,
    pub synthetic: SyntheticMarket,
    /// Seed of the synthetic market, independent of the run seed so several
    /// runs can share one market.
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            assets: Vec::new(),
            index: None,
            synthetic: SyntheticMarket::default(),
            synthetic_seed: 7,
        }
    }
}

/// Train/test ranges, either as ISO dates (start inclusive, end exclusive)
/// or as a fraction of the bars when no dates are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_start: Option<String>,
    pub train_end: Option<String>,
    pub test_start: Option<String>,
    pub test_end: Option<String>,
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_start: None,
            train_end: None,
            test_start: None,
            test_end: None,
            train_fraction: 0.8,
        }
    }
}

/// Parsed date bounds; `None` is open-ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DateBounds {
    pub train: (Option<DateTime<Utc>>, Option<DateTime<Utc>>),
    pub test: (Option<DateTime<Utc>>, Option<DateTime<Utc>>),
}

impl SplitConfig {
    pub fn uses_dates(&self) -> bool {
        self.train_start.is_some() || self.train_end.is_some() || self.test_start.is_some() || self.test_end.is_some()
    }

    pub fn bounds(&self) -> Result<DateBounds> {
        let parse = |field: &str, v: &Option<String>| -> Result<Option<DateTime<Utc>>> {
            v.as_deref()
                .map(|s| parse_timestamp(s).ok_or_else(|| CoreError::Config(format!("split.{field}: bad date `{s}`"))))
                .transpose()
        };
        Ok(DateBounds {
            train: (parse("train_start", &self.train_start)?, parse("train_end", &self.train_end)?),
            test: (parse("test_start", &self.test_start)?, parse("test_end", &self.test_end)?),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.uses_dates() {
            if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
                return Err(CoreError::Config(format!(
                    "split.train_fraction {} must lie in (0, 1)",
                    self.train_fraction
                )));
            }
            return Ok(());
        }
        let b = self.bounds()?;
        let (Some(train_end), Some(test_start)) = (b.train.1, b.test.0) else {
            return Err(CoreError::Config("date splits need split.train_end and split.test_start".into()));
        };
        if test_start < train_end {
            return Err(CoreError::Config("test range must start after the train range ends".into()));
        }
        for (name, (s, e)) in [("train", b.train), ("test", b.test)] {
            if let (Some(s), Some(e)) = (s, e) {
                if s >= e {
                    return Err(CoreError::Config(format!("{name} range is empty")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleFlags {
    pub ipm: bool,
    pub dam: bool,
    pub bcm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "ddpg")]
    Ddpg,
    #[serde(rename = "rdpg-dsr")]
    RdpgDsr,
    #[serde(rename = "rdpg-d3r")]
    RdpgD3r,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DamConfig {
    /// Synthetic bars prepended to every training episode.
    pub horizon: usize,
    /// Fine steps per synthetic bar.
    pub fine_steps: usize,
    pub scale: FineScale,
}

impl Default for DamConfig {
    fn default() -> Self {
        Self {
            horizon: 42,
            fine_steps: 8,
            scale: FineScale::SplitBar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub modules: ModuleFlags,
    pub execution: ExecutionConfig,
    pub agent: AgentConfig,
    pub ndybm: NdybmConfig,
    pub gan: GanConfig,
    pub dam: DamConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative data path is taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.data.path, path.parent()) {
            if p.is_relative() {
                cfg.data.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.execution.validate()?;
        self.agent.validate()?;
        if self.modules.ipm {
            self.ndybm.validate()?;
        }
        if self.modules.dam {
            self.gan.validate()?;
            if self.dam.fine_steps == 0 {
                return Err(CoreError::Config("dam.fine_steps must be >= 1".into()));
            }
        }
        if self.data.path.is_none() && self.data.synthetic.assets == 0 {
            return Err(CoreError::Config("a synthetic market needs at least one asset".into()));
        }
        Ok(())
    }
}
