//! Linear FPGA resource model calibrated at one reference implementation.
//!
//! Anchors, all at MHA `<p_dpu 16, p_quan 128, p_vu 32, p_ln 8>` and FFN
//! `<16, 128, 96, 8>` with 64 PEs per DPU:
//! - QMM engines: 37338 / 37330 LUT and 13725 / 13702 FF for 16 x 64 PEs.
//! - Quantization units: 13952 LUT, 29952 FF and 256 DSP for 256 lanes.
//! - Everything else (vector, LN and softmax units, buffers, DMA): 57845
//!   LUT, 79594 FF and 768 DSP for a combined `p_vu + p_ln` of 144, and
//!   114 BRAM for 2 MiB of on-chip buffer.

use serde::{Deserialize, Serialize};

use super::HwConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub lut: f64,
    pub ff: f64,
    pub bram: f64,
    pub dsp: f64,
}

/// ZCU102 availability.
pub const AVAILABLE: ResourceEstimate = ResourceEstimate {
    lut: 274080.0,
    ff: 548160.0,
    bram: 912.0,
    dsp: 2520.0,
};

/// Share of the device a design may use.
pub const UTILIZATION_CAP: f64 = 0.8;

const QMM_PES_REF: f64 = 16.0 * 64.0;
const MHA_QMM_LUT: f64 = 37338.0;
const MHA_QMM_FF: f64 = 13725.0;
const FFN_QMM_LUT: f64 = 37330.0;
const FFN_QMM_FF: f64 = 13702.0;
const QU_LANES_REF: f64 = 256.0;
const QU_LUT: f64 = 13952.0;
const QU_FF: f64 = 29952.0;
const QU_DSP: f64 = 256.0;
const OTHER_LANES_REF: f64 = 144.0;
const OTHER_LUT: f64 = 57845.0;
const OTHER_FF: f64 = 79594.0;
const OTHER_DSP: f64 = 768.0;
const BUFFER_REF: f64 = 2.0 * 1024.0 * 1024.0;
const OTHER_BRAM: f64 = 114.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceBreakdown {
    pub mha_qmm: ResourceEstimate,
    pub ffn_qmm: ResourceEstimate,
    pub quant: ResourceEstimate,
    pub others: ResourceEstimate,
    pub total: ResourceEstimate,
}

impl ResourceEstimate {
    pub const ZERO: ResourceEstimate = ResourceEstimate {
        lut: 0.0,
        ff: 0.0,
        bram: 0.0,
        dsp: 0.0,
    };

    fn add(self, o: Self) -> Self {
        ResourceEstimate {
            lut: self.lut + o.lut,
            ff: self.ff + o.ff,
            bram: self.bram + o.bram,
            dsp: self.dsp + o.dsp,
        }
    }

    /// Largest used fraction of any resource type.
    pub fn max_fraction_of(&self, avail: &ResourceEstimate) -> f64 {
        [
            self.lut / avail.lut,
            self.ff / avail.ff,
            self.bram / avail.bram,
            self.dsp / avail.dsp,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn fits(&self) -> bool {
        self.max_fraction_of(&AVAILABLE) <= UTILIZATION_CAP
    }
}

pub fn resource_breakdown(hw_mha: &HwConfig, hw_ffn: &HwConfig) -> ResourceBreakdown {
    let qmm = |hw: &HwConfig, lut: f64, ff: f64| {
        let pes = (hw.p_dpu * hw.p_pe) as f64 / QMM_PES_REF;
        ResourceEstimate {
            lut: lut * pes,
            ff: ff * pes,
            ..ResourceEstimate::ZERO
        }
    };
    let lanes = (hw_mha.p_quan + hw_ffn.p_quan) as f64 / QU_LANES_REF;
    let quant = ResourceEstimate {
        lut: QU_LUT * lanes,
        ff: QU_FF * lanes,
        bram: 0.0,
        dsp: QU_DSP * lanes,
    };
    let vec_lanes = (hw_mha.p_vu + hw_mha.p_ln + hw_ffn.p_vu + hw_ffn.p_ln) as f64 / OTHER_LANES_REF;
    let buffers = (hw_mha.buffer_bytes + hw_ffn.buffer_bytes) as f64 / BUFFER_REF;
    let others = ResourceEstimate {
        lut: OTHER_LUT * vec_lanes,
        ff: OTHER_FF * vec_lanes,
        bram: OTHER_BRAM * buffers,
        dsp: OTHER_DSP * vec_lanes,
    };
    let mha_qmm = qmm(hw_mha, MHA_QMM_LUT, MHA_QMM_FF);
    let ffn_qmm = qmm(hw_ffn, FFN_QMM_LUT, FFN_QMM_FF);
    ResourceBreakdown {
        mha_qmm,
        ffn_qmm,
        quant,
        others,
        total: mha_qmm.add(ffn_qmm).add(quant).add(others),
    }
}

pub fn estimate_resources(hw_mha: &HwConfig, hw_ffn: &HwConfig) -> ResourceEstimate {
    resource_breakdown(hw_mha, hw_ffn).total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_point_reproduces_anchor_totals() {
        let r = estimate_resources(&HwConfig::reference_mha(), &HwConfig::reference_ffn());
        for (got, want) in [(r.lut, 146465.0), (r.ff, 136973.0), (r.bram, 114.0), (r.dsp, 1024.0)] {
            assert!((got - want).abs() / want < 1e-9, "{got} vs {want}");
        }
        assert!(r.fits());
    }

    #[test]
    fn qmm_scales_linearly() {
        let a = resource_breakdown(&HwConfig::reference_mha(), &HwConfig::reference_ffn());
        let big = HwConfig {
            p_dpu: 32,
            ..HwConfig::reference_mha()
        };
        let b = resource_breakdown(&big, &HwConfig::reference_ffn());
        assert!((b.mha_qmm.lut - 2.0 * a.mha_qmm.lut).abs() < 1e-9);
        assert_eq!(a.ffn_qmm, b.ffn_qmm);
    }

    #[test]
    fn minimal_and_maximal_configs() {
        let min = HwConfig {
            p_dpu: 8,
            p_quan: 32,
            p_vu: 32,
            p_ln: 8,
            ..HwConfig::default()
        };
        let r = estimate_resources(&min, &min);
        assert!(r.max_fraction_of(&AVAILABLE) < UTILIZATION_CAP);
        let max = HwConfig {
            p_dpu: 96,
            p_quan: 128,
            p_vu: 160,
            p_ln: 48,
            ..HwConfig::default()
        };
        assert!(!estimate_resources(&max, &max).fits());
    }
}
