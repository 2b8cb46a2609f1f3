//! Stage chains of the MHA and FFN modules and their timing.

use serde::{Deserialize, Serialize};

use super::events::{chain_analytic, run_chain, unit_loads, Stage, Unit};
use super::qmm::{head_assignment, qmm_schedule_aa, qmm_schedule_aw};
use super::HwConfig;
use crate::error::{Error, Result};
use crate::refmodel::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Mha,
    Ffn,
}

/// One pipelined phase: serial preloads, then rows streamed through a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    /// Tasks streamed through the chain (rows, or row groups).
    pub rows: usize,
    pub preload_bytes: u64,
    pub preload_cycles: u64,
    pub stages: Vec<Stage>,
    /// Bytes held on chip for the whole phase (weights, K/V).
    pub resident_bytes: u64,
    /// Bytes one task in flight occupies.
    pub task_bytes: u64,
    /// External-memory traffic of the phase.
    pub dram_bytes: u64,
}

fn code_bytes(elements: u64, bits: u64) -> u64 {
    (elements * bits).div_ceil(8)
}

const F16_BYTES: u64 = 2;

struct Builder<'a> {
    hw: &'a HwConfig,
    stages: Vec<Stage>,
    dram: u64,
}

impl<'a> Builder<'a> {
    fn new(hw: &'a HwConfig) -> Self {
        Builder {
            hw,
            stages: Vec::new(),
            dram: 0,
        }
    }

    fn dma(&mut self, name: &str, bytes: u64) {
        self.dram += bytes;
        self.stages
            .push(Stage::new(name, Unit::Dma, self.hw.dma_cycles(bytes), self.hw.dma_latency()));
    }

    fn lanes(&mut self, name: &str, unit: Unit, elements: u64, lanes: usize) {
        self.stages.push(Stage::new(
            name,
            unit,
            elements.div_ceil(lanes as u64),
            self.hw.unit_latency,
        ));
    }

    fn qmm(&mut self, name: &str, cycles_with_fill: u64, fill: u64) {
        self.stages
            .push(Stage::new(name, Unit::Qmm, cycles_with_fill - fill, fill));
    }
}

/// QKV projection phase, then attention (row groups), for the MHA module.
pub fn mha_phases(cfg: &ModelConfig, hw: &HwConfig) -> Vec<Phase> {
    let s = cfg.seq_len as u64;
    let d = cfg.d_hid as u64;
    let h = cfg.num_head as u64;
    let dh = cfg.d_head() as u64;
    let n = cfg.b_act as u64;

    // Phase A: X -> quantize -> [Q K V] projection -> dequantize -> quantize.
    let mut a = Builder::new(hw);
    a.dma("read_x", d * F16_BYTES);
    a.lanes("quant_in", Unit::Qu, d, hw.p_quan);
    a.dma("spill_in", 2 * code_bytes(d, n));
    let p = qmm_schedule_aw(1, d, 3 * d, hw, 1);
    a.qmm("qkv_proj", p.cycles, p.fill);
    a.lanes("dequant_qkv", Unit::Vu, 3 * d, hw.p_vu);
    a.lanes("quant_qkv", Unit::Qu, 3 * d, hw.p_quan);
    a.dma("write_qkv", code_bytes(3 * d, n));
    let weights_a = code_bytes(3 * d * d, 1);
    let phase_a = Phase {
        name: "mha_qkv".into(),
        rows: cfg.seq_len,
        preload_bytes: weights_a,
        preload_cycles: hw.dma_cycles(weights_a),
        stages: a.stages,
        resident_bytes: weights_a,
        task_bytes: 3 * d * F16_BYTES,
        dram_bytes: weights_a + s * a.dram,
    };

    // Phase B: per row group, scores -> softmax -> context -> output
    // projection -> residual -> LN.
    let (_, _, g) = head_assignment(h, hw.p_dpu as u64);
    let tasks = s.div_ceil(g);
    let mut b = Builder::new(hw);
    b.dma("read_q", code_bytes(g * d, n));
    let p = qmm_schedule_aa(g, dh, s, h, hw, n);
    b.qmm("qk", p.cycles, p.fill);
    b.lanes("dequant_scores", Unit::Vu, g * h * s, hw.p_vu);
    b.lanes("softmax", Unit::Smx, g * h * s, hw.softmax_parallelism);
    b.lanes("quant_scores", Unit::Qu, g * h * s, hw.p_quan);
    b.dma("spill_scores", 2 * code_bytes(g * h * s, n));
    let p = qmm_schedule_aa(g, s, dh, h, hw, n);
    b.qmm("sv", p.cycles, p.fill);
    b.lanes("dequant_ctx", Unit::Vu, g * d, hw.p_vu);
    b.lanes("quant_ctx", Unit::Qu, g * d, hw.p_quan);
    b.dma("spill_ctx", 2 * code_bytes(g * d, n));
    let p = qmm_schedule_aw(g, d, d, hw, 1);
    b.qmm("out_proj", p.cycles, p.fill);
    b.dma("read_residual", g * d * F16_BYTES);
    b.lanes("residual", Unit::Vu, g * d, hw.p_vu);
    b.lanes("ln", Unit::Ln, g * d, hw.p_ln);
    b.dma("write_out", g * d * F16_BYTES);
    let weights_b = code_bytes(d * d, 1);
    let kv = 2 * code_bytes(s * d, n);
    let phase_b = Phase {
        name: "mha_attention".into(),
        rows: tasks as usize,
        preload_bytes: weights_b + kv,
        preload_cycles: hw.dma_cycles(weights_b) + hw.dma_cycles(kv / 2) * 2,
        stages: b.stages,
        resident_bytes: weights_b + kv,
        task_bytes: g * (h * s).max(d) * F16_BYTES,
        dram_bytes: weights_b + kv + tasks * b.dram,
    };
    vec![phase_a, phase_b]
}

pub fn ffn_phases(cfg: &ModelConfig, hw: &HwConfig) -> Vec<Phase> {
    let s = cfg.seq_len as u64;
    let d = cfg.d_hid as u64;
    let di = cfg.d_inter as u64;
    let n = cfg.b_act as u64;
    let mut f = Builder::new(hw);
    f.dma("read_x", d * F16_BYTES);
    f.lanes("quant_in", Unit::Qu, d, hw.p_quan);
    f.dma("spill_in", 2 * code_bytes(d, n));
    let p = qmm_schedule_aw(1, d, di, hw, 1);
    f.qmm("up_proj", p.cycles, p.fill);
    f.lanes("dequant_relu", Unit::Vu, di, hw.p_vu);
    f.lanes("quant_relu", Unit::Qu, di, hw.p_quan);
    f.dma("spill_mid", 2 * code_bytes(di, n));
    let p = qmm_schedule_aw(1, di, d, hw, 1);
    f.qmm("down_proj", p.cycles, p.fill);
    f.dma("read_residual", d * F16_BYTES);
    f.lanes("residual", Unit::Vu, d, hw.p_vu);
    f.lanes("ln", Unit::Ln, d, hw.p_ln);
    f.dma("write_out", d * F16_BYTES);
    let weights = 2 * code_bytes(d * di, 1);
    vec![Phase {
        name: "ffn".into(),
        rows: cfg.seq_len,
        preload_bytes: weights,
        preload_cycles: hw.dma_cycles(weights / 2) * 2,
        stages: f.stages,
        resident_bytes: weights,
        task_bytes: di.max(d) * F16_BYTES,
        dram_bytes: weights + s * f.dram,
    }]
}

pub fn module_phases(module: Module, cfg: &ModelConfig, hw: &HwConfig) -> Vec<Phase> {
    match module {
        Module::Mha => mha_phases(cfg, hw),
        Module::Ffn => ffn_phases(cfg, hw),
    }
}

/// Rows that fit in the buffer next to the resident data.
pub fn row_window(phase: &Phase, hw: &HwConfig) -> Result<usize> {
    let buffer = hw.buffer_bytes;
    if phase.resident_bytes > buffer {
        return Err(Error::ConfigInfeasible(format!(
            "{}: resident data of {} bytes exceeds the {buffer}-byte buffer",
            phase.name, phase.resident_bytes
        )));
    }
    let window = ((buffer - phase.resident_bytes) / phase.task_bytes.max(1)) as usize;
    if window < 2 {
        return Err(Error::ConfigInfeasible(format!(
            "{}: {} free bytes cannot double-buffer {}-byte rows",
            phase.name,
            buffer - phase.resident_bytes,
            phase.task_bytes
        )));
    }
    Ok(window)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub name: String,
    pub start: u64,
    pub end: u64,
    pub preload_cycles: u64,
    pub rows: usize,
    pub analytic_cycles: u64,
    pub max_rows_in_flight: usize,
    pub row_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleTiming {
    pub module: Module,
    pub cycles: u64,
    pub phases: Vec<PhaseTiming>,
    /// Busy cycles per unit, indexed by [`Unit::id`].
    pub busy: [u64; 6],
    pub dram_bytes: u64,
}

impl ModuleTiming {
    pub fn utilization(&self, unit: Unit) -> f64 {
        if self.cycles == 0 {
            0.0
        } else {
            self.busy[unit.id()] as f64 / self.cycles as f64
        }
    }
}

/// Event-driven timing of one module for one layer of one sample.
pub fn simulate_module(module: Module, cfg: &ModelConfig, hw: &HwConfig) -> Result<ModuleTiming> {
    hw.validate()?;
    let mut t = 0u64;
    let mut busy = [0u64; 6];
    let mut dram = 0u64;
    let mut timings = Vec::new();
    for phase in module_phases(module, cfg, hw) {
        let window = row_window(&phase, hw)?;
        busy[Unit::Dma.id()] += phase.preload_cycles;
        let start = t;
        let out = run_chain(&phase.stages, phase.rows, t + phase.preload_cycles, window);
        for (b, o) in busy.iter_mut().zip(out.busy) {
            *b += o;
        }
        t = out.end;
        dram += phase.dram_bytes;
        timings.push(PhaseTiming {
            name: phase.name.clone(),
            start,
            end: t,
            preload_cycles: phase.preload_cycles,
            rows: phase.rows,
            analytic_cycles: chain_analytic(&phase.stages, phase.rows, phase.preload_cycles),
            max_rows_in_flight: out.max_in_flight,
            row_window: window,
        });
    }
    Ok(ModuleTiming {
        module,
        cycles: t,
        phases: timings,
        busy,
        dram_bytes: dram,
    })
}

/// Closed-form counterpart of [`simulate_module`].
pub fn analytic_module(module: Module, cfg: &ModelConfig, hw: &HwConfig) -> u64 {
    module_phases(module, cfg, hw)
        .iter()
        .map(|p| chain_analytic(&p.stages, p.rows, p.preload_cycles))
        .sum()
}

/// Closed-form module latency after checking that every phase fits the
/// buffer.
pub fn module_latency(module: Module, cfg: &ModelConfig, hw: &HwConfig) -> Result<u64> {
    hw.validate()?;
    let mut total = 0;
    for p in module_phases(module, cfg, hw) {
        row_window(&p, hw)?;
        total += chain_analytic(&p.stages, p.rows, p.preload_cycles);
    }
    Ok(total)
}

/// Per-row loads of the busiest unit in each phase.
pub fn bottlenecks(module: Module, cfg: &ModelConfig, hw: &HwConfig) -> Vec<(String, Unit, u64)> {
    module_phases(module, cfg, hw)
        .iter()
        .map(|p| {
            let loads = unit_loads(&p.stages);
            let (u, l) = Unit::ALL
                .iter()
                .map(|&u| (u, loads[u.id()]))
                .max_by_key(|&(_, l)| l)
                .expect("six units");
            (p.name.clone(), u, l)
        })
        .collect()
}
