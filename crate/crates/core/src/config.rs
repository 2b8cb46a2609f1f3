//! TOML run configuration. Every section is optional; unknown keys are
//! rejected. A `[model]` or `[hw.*]` table, when present, must give every
//! key that has no default listed below.
//!
//! ```toml
//! seed = 0
//!
//! [model]            # default: BMT, 12 layers, 384 / 1536, 4-bit, seq 128
//!                    # num_head defaults to 12
//! model_kind = "BMT"
//! layers = 12
//! d_hid = 384
//! d_inter = 1536
//! b_act = 4
//! seq_len = 128
//!
//! [hw.mha]           # default: p_dpu 16, p_quan 128, p_vu 32, p_ln 8
//! [hw.ffn]           # default: p_dpu 16, p_quan 128, p_vu 96, p_ln 8
//!                    # both also take optional p_pe (64), softmax_parallelism (4),
//!                    # buffer_bytes (1 MiB), dram_bytes_per_cycle (16 or
//!                    # "unlimited") and unit_latency (4)
//!
//! [sim]
//! batch = 2
//!
//! [dse]
//! provider = "lookup"   # or "live"
//! workers = 8           # default: logical cores
//! [dse.space]           # axis lists, see DesignSpace; default is the full grid
//! [dse.constraints]     # max_accuracy_loss 0.01, robustness_upper_quartile true
//! [dse.lookup]          # task "MRPC", size_penalty 1.5
//! [dse.live]            # toy-scale provider settings
//!
//! [paths]
//! out = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dse::{Constraints, DesignSpace, LiveProvider, LookupProvider, MetricProvider};
use crate::error::{Error, Result};
use crate::refmodel::{ModelConfig, ModelKind, DEFAULT_NUM_HEAD};
use crate::simulator::{HwConfig, DEFAULT_BATCH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub seed: u64,
    pub model: ModelConfig,
    pub hw: HwSection,
    pub sim: SimSection,
    pub dse: DseSection,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HwSection {
    pub mha: HwConfig,
    pub ffn: HwConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Lookup,
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DseSection {
    pub provider: ProviderKind,
    pub workers: Option<usize>,
    pub space: DesignSpace,
    pub constraints: Constraints,
    pub lookup: LookupProvider,
    pub live: LiveProvider,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out: PathBuf,
}

/// The selected reference model.
pub fn default_model() -> ModelConfig {
    ModelConfig {
        layers: 12,
        d_hid: 384,
        d_inter: 1536,
        num_head: DEFAULT_NUM_HEAD,
        b_act: 4,
        model_kind: ModelKind::BMT,
        seq_len: 128,
    }
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            seed: 0,
            model: default_model(),
            hw: HwSection::default(),
            sim: SimSection::default(),
            dse: DseSection::default(),
            paths: Paths::default(),
        }
    }
}

impl Default for HwSection {
    fn default() -> Self {
        HwSection {
            mha: HwConfig::reference_mha(),
            ffn: HwConfig::reference_ffn(),
        }
    }
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection { batch: DEFAULT_BATCH }
    }
}

impl Default for DseSection {
    fn default() -> Self {
        DseSection {
            provider: ProviderKind::Lookup,
            workers: None,
            space: DesignSpace::default(),
            constraints: Constraints::default(),
            lookup: LookupProvider::default(),
            live: LiveProvider::default(),
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Paths { out: PathBuf::from("out") }
    }
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hw.mha.validate()?;
        self.hw.ffn.validate()?;
        if self.sim.batch == 0 {
            return Err(Error::Config("sim.batch must be positive".into()));
        }
        if self.dse.workers == Some(0) {
            return Err(Error::Config("dse.workers must be positive".into()));
        }
        Ok(())
    }

    pub fn provider(&self) -> Box<dyn MetricProvider> {
        match self.dse.provider {
            ProviderKind::Lookup => Box::new(self.dse.lookup.clone()),
            ProviderKind::Live => Box::new(LiveProvider {
                seed: self.seed,
                ..self.dse.live.clone()
            }),
        }
    }
}
