//! Cycle-level model of the streaming accelerator: per-module event
//! timing, the inter-layer pipeline, a resource estimate and a functional
//! path that drives the bit-serial arithmetic.

pub mod events;
pub mod functional;
pub mod layer;
pub mod pipeline;
pub mod qmm;
pub mod resources;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refmodel::ModelConfig;

pub use events::{chain_analytic, run_chain, Stage, Unit};
pub use functional::{simulate, BitSerialDatapath, FunctionalRun};
pub use layer::{analytic_module, module_latency, simulate_module, Module, ModuleTiming, PhaseTiming};
pub use pipeline::{inter_layer_total, run_inter_layer_pipeline, run_intra_layer_pipeline, InterLayerResult};
pub use qmm::{head_assignment, qmm_schedule_aa, qmm_schedule_aw, HeadAssignment, QmmPlan};
pub use resources::{estimate_resources, resource_breakdown, ResourceEstimate, AVAILABLE, UTILIZATION_CAP};

/// Accelerator clock.
pub const CLOCK_HZ: f64 = 200e6;

/// Samples processed back to back by the inter-layer pipeline.
pub const DEFAULT_BATCH: usize = 2;

/// Parameters of one module's engine (MHA or FFN).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwConfig {
    pub p_dpu: usize,
    #[serde(default = "default_p_pe")]
    pub p_pe: usize,
    pub p_quan: usize,
    pub p_vu: usize,
    pub p_ln: usize,
    #[serde(default = "default_softmax")]
    pub softmax_parallelism: usize,
    #[serde(default = "default_buffer")]
    pub buffer_bytes: u64,
    /// DRAM bandwidth; `None` models an unlimited link.
    #[serde(default = "default_bandwidth", with = "bandwidth")]
    pub dram_bytes_per_cycle: Option<u64>,
    #[serde(default = "default_latency")]
    pub unit_latency: u64,
}

fn default_p_pe() -> usize {
    crate::bitengine::P_PE
}
fn default_softmax() -> usize {
    4
}
fn default_buffer() -> u64 {
    1 << 20
}
fn default_bandwidth() -> Option<u64> {
    Some(16)
}
fn default_latency() -> u64 {
    4
}

/// Bandwidth is either a positive integer or the string "unlimited".
mod bandwidth {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_u64(*b),
            None => s.serialize_str("unlimited"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(b) => Ok(Some(b)),
            Raw::Str(s) if s == "unlimited" => Ok(None),
            Raw::Str(s) => Err(de::Error::custom(format!(
                "expected a byte count or \"unlimited\", got {s:?}"
            ))),
        }
    }
}

impl Default for HwConfig {
    fn default() -> Self {
        HwConfig::reference_mha()
    }
}

impl HwConfig {
    /// Reference MHA engine `<16, 128, 32, 8>`.
    pub fn reference_mha() -> Self {
        HwConfig {
            p_dpu: 16,
            p_pe: default_p_pe(),
            p_quan: 128,
            p_vu: 32,
            p_ln: 8,
            softmax_parallelism: default_softmax(),
            buffer_bytes: default_buffer(),
            dram_bytes_per_cycle: default_bandwidth(),
            unit_latency: default_latency(),
        }
    }

    /// Reference FFN engine `<16, 128, 96, 8>`.
    pub fn reference_ffn() -> Self {
        HwConfig {
            p_vu: 96,
            ..HwConfig::reference_mha()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("p_dpu", self.p_dpu),
            ("p_pe", self.p_pe),
            ("p_quan", self.p_quan),
            ("p_vu", self.p_vu),
            ("p_ln", self.p_ln),
            ("softmax_parallelism", self.softmax_parallelism),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.buffer_bytes == 0 {
            return Err(Error::InvalidArgument("buffer_bytes must be positive".into()));
        }
        if self.dram_bytes_per_cycle == Some(0) {
            return Err(Error::InvalidArgument(
                "dram_bytes_per_cycle must be positive or unlimited".into(),
            ));
        }
        Ok(())
    }

    pub fn dma_cycles(&self, bytes: u64) -> u64 {
        match self.dram_bytes_per_cycle {
            Some(bw) => bytes.div_ceil(bw.max(1)),
            None => 0,
        }
    }

    pub fn dma_latency(&self) -> u64 {
        match self.dram_bytes_per_cycle {
            Some(_) => self.unit_latency,
            None => 0,
        }
    }
}

/// Timing of a full encoder run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mha: ModuleTiming,
    pub ffn: ModuleTiming,
    pub batch: usize,
    pub layers: usize,
    pub total_cycles: u64,
    pub analytic_cycles: u64,
    pub latency_ms: f64,
    pub gops: f64,
    pub resources: ResourceEstimate,
}

impl SimReport {
    /// Relative gap between the event-driven and closed-form totals.
    pub fn analytic_gap(&self) -> f64 {
        (self.total_cycles as f64 - self.analytic_cycles as f64).abs() / self.total_cycles.max(1) as f64
    }
}

/// Closed-form latency of `batch` samples through every layer.
pub fn analytic_latency(cfg: &ModelConfig, hw_mha: &HwConfig, hw_ffn: &HwConfig, batch: usize) -> u64 {
    let m = analytic_module(Module::Mha, cfg, hw_mha);
    let f = analytic_module(Module::Ffn, cfg, hw_ffn);
    inter_layer_total(m, f, (batch * cfg.layers) as u64)
}

/// Throughput in GOPS (two ops per MAC) of `batch` samples finishing in `cycles`.
pub fn gops(cfg: &ModelConfig, batch: usize, cycles: u64) -> f64 {
    if cycles == 0 {
        return 0.0;
    }
    let ops = 2.0 * cfg.macs_per_layer() as f64 * (batch * cfg.layers) as f64;
    ops / (cycles as f64 / CLOCK_HZ) / 1e9
}

/// Event-driven timing of both modules followed by the inter-layer pipeline.
pub fn simulate_timing(cfg: &ModelConfig, hw_mha: &HwConfig, hw_ffn: &HwConfig, batch: usize) -> Result<SimReport> {
    cfg.validate()?;
    let mha = simulate_module(Module::Mha, cfg, hw_mha)?;
    let ffn = simulate_module(Module::Ffn, cfg, hw_ffn)?;
    let inter = run_inter_layer_pipeline(&vec![mha.cycles; cfg.layers], &vec![ffn.cycles; cfg.layers], batch)?;
    let total = inter.total_cycles;
    Ok(SimReport {
        batch,
        layers: cfg.layers,
        total_cycles: total,
        analytic_cycles: analytic_latency(cfg, hw_mha, hw_ffn, batch),
        latency_ms: total as f64 / CLOCK_HZ * 1e3,
        gops: gops(cfg, batch, total),
        resources: estimate_resources(hw_mha, hw_ffn),
        mha,
        ffn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::ModelKind;

    fn bmt() -> ModelConfig {
        ModelConfig {
            layers: 12,
            d_hid: 768,
            d_inter: 3072,
            num_head: 12,
            b_act: 4,
            model_kind: ModelKind::BMT,
            seq_len: 128,
        }
    }

    #[test]
    fn hw_config_toml_round_trip() {
        let hw: HwConfig = toml::from_str("p_dpu = 8\np_quan = 64\np_vu = 32\np_ln = 8\n").unwrap();
        assert_eq!(hw.p_pe, 64);
        assert_eq!(hw.dram_bytes_per_cycle, Some(16));
        let hw: HwConfig =
            toml::from_str("p_dpu = 8\np_quan = 64\np_vu = 32\np_ln = 8\ndram_bytes_per_cycle = \"unlimited\"\n")
                .unwrap();
        assert_eq!(hw.dram_bytes_per_cycle, None);
        let back: HwConfig = toml::from_str(&toml::to_string(&hw).unwrap()).unwrap();
        assert_eq!(back, hw);
        assert!(toml::from_str::<HwConfig>("p_dpu = 8\np_quan = 64\np_vu = 32\np_ln = 8\nfoo = 1\n").is_err());
        assert!(toml::from_str::<HwConfig>("p_dpu = 8\np_quan = 64\np_vu = 32\np_ln = 8\ndram_bytes_per_cycle = \"fast\"\n").is_err());
    }

    #[test]
    fn validate_rejects_zero() {
        assert!(HwConfig { p_dpu: 0, ..HwConfig::default() }.validate().is_err());
        assert!(HwConfig {
            dram_bytes_per_cycle: Some(0),
            ..HwConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn reference_design_throughput() {
        let r = simulate_timing(&bmt(), &HwConfig::reference_mha(), &HwConfig::reference_ffn(), DEFAULT_BATCH).unwrap();
        assert_eq!(r.total_cycles, inter_layer_total(r.mha.cycles, r.ffn.cycles, 24));
        assert!(r.analytic_gap() < 0.05, "gap {}", r.analytic_gap());
        assert!(r.gops > 336.7 && r.gops < 3367.0, "gops {}", r.gops);
    }
}
