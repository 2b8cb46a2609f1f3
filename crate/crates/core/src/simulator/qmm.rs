//! Tiling of the two QMM data-access patterns onto the DPU array.

use serde::{Deserialize, Serialize};

use super::HwConfig;
use crate::bitengine::tree_depth;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAssignment {
    /// One head per DPU; some DPUs may idle.
    OnePerDpu,
    /// More heads than DPUs: heads run in serialized batches.
    Batched,
    /// Fewer heads than DPUs: each head's rows spread over several DPUs.
    RowSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QmmPlan {
    /// Output columns each DPU produces (activation-weight pattern).
    pub cols_per_dpu: u64,
    /// Serialized head batches (activation-activation pattern).
    pub batches: u64,
    /// Rows processed concurrently per head (activation-activation pattern).
    pub rows_per_group: u64,
    pub assignment: Option<HeadAssignment>,
    /// Activations are multicast to all DPUs (pattern a) or unicast (pattern b).
    pub multicast: bool,
    pub fill: u64,
    pub cycles: u64,
}

/// Activation x weight: weight columns partitioned across DPUs, the
/// activation row multicast to all of them.
pub fn qmm_schedule_aw(m: u64, k: u64, n_cols: u64, hw: &HwConfig, serial_cycles: u64) -> QmmPlan {
    let cols_per_dpu = n_cols.div_ceil(hw.p_dpu as u64);
    let fill = tree_depth(hw.p_pe) as u64;
    let cycles = cols_per_dpu * m * k.div_ceil(hw.p_pe as u64) * serial_cycles + fill;
    QmmPlan {
        cols_per_dpu,
        batches: 1,
        rows_per_group: 1,
        assignment: None,
        multicast: true,
        fill,
        cycles,
    }
}

/// How heads map onto DPUs. Returns (assignment, batches, rows per group).
pub fn head_assignment(num_head: u64, p_dpu: u64) -> (HeadAssignment, u64, u64) {
    if num_head > p_dpu {
        (HeadAssignment::Batched, num_head.div_ceil(p_dpu), 1)
    } else if num_head < p_dpu && p_dpu.is_multiple_of(num_head) {
        (HeadAssignment::RowSplit, 1, p_dpu / num_head)
    } else {
        // Equal counts, or a split that does not divide evenly.
        (HeadAssignment::OnePerDpu, 1, 1)
    }
}

/// Activation x activation for one head-partitioned product: `m x k` times
/// `k x n_cols` per head, bit-serial in the `bits`-wide operand.
pub fn qmm_schedule_aa(m: u64, k: u64, n_cols: u64, num_head: u64, hw: &HwConfig, bits: u64) -> QmmPlan {
    let (assignment, batches, g) = head_assignment(num_head.max(1), hw.p_dpu as u64);
    let fill = tree_depth(hw.p_pe) as u64;
    let cycles = batches * m.div_ceil(g) * n_cols * k.div_ceil(hw.p_pe as u64) * bits + fill;
    QmmPlan {
        cols_per_dpu: n_cols,
        batches,
        rows_per_group: g,
        assignment: Some(assignment),
        multicast: false,
        fill,
        cycles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw(p_dpu: usize) -> HwConfig {
        HwConfig {
            p_dpu,
            ..HwConfig::default()
        }
    }

    #[test]
    fn aw_examples() {
        let p = qmm_schedule_aw(128, 768, 768, &hw(16), 1);
        assert_eq!(p.cols_per_dpu, 48);
        assert_eq!(p.cycles, 73728 + 5);
        assert!(p.multicast);
        let p = qmm_schedule_aw(128, 768, 8, &hw(16), 1);
        assert_eq!(p.cycles, 128 * 12 + 5);
        let p = qmm_schedule_aw(1, 64, 1, &hw(16), 1);
        assert_eq!(p.cycles, 1 + 5);
    }

    #[test]
    fn aa_examples() {
        let p = qmm_schedule_aa(128, 32, 128, 12, &hw(16), 4);
        assert_eq!(p.assignment, Some(HeadAssignment::OnePerDpu));
        assert_eq!(p.cycles, 128 * 128 * 4 + 5);
        let p = qmm_schedule_aa(128, 32, 128, 16, &hw(16), 4);
        assert_eq!((p.batches, p.rows_per_group), (1, 1));
        let p = qmm_schedule_aa(128, 32, 128, 32, &hw(16), 4);
        assert_eq!(p.assignment, Some(HeadAssignment::Batched));
        assert_eq!(p.batches, 2);
        let p = qmm_schedule_aa(128, 32, 128, 12, &hw(48), 4);
        assert_eq!(p.assignment, Some(HeadAssignment::RowSplit));
        assert_eq!(p.rows_per_group, 4);
        assert_eq!(p.cycles, 32 * 128 * 4 + 5);
    }
}
