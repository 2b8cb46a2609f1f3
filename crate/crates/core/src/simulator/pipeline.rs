//! Intra-layer (row) and inter-layer (module) pipelines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntraLayerResult {
    pub pipelined: u64,
    pub sequential: u64,
    /// Most rows resident between entering the first stage and leaving the last.
    pub max_rows_in_flight: usize,
}

/// Row-by-row pipeline over stages that each own their hardware.
/// `costs[s]` is the per-row time of stage `s`.
pub fn run_intra_layer_pipeline(costs: &[u64], rows: usize) -> Result<IntraLayerResult> {
    if costs.is_empty() {
        return Err(Error::InvalidArgument("a pipeline needs at least one stage".into()));
    }
    let sequential = rows as u64 * costs.iter().sum::<u64>();
    // done[s]: completion time of the previous row at stage s.
    let mut done = vec![0u64; costs.len()];
    let mut spans = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut t = 0u64;
        let mut enter = 0u64;
        for (s, &c) in costs.iter().enumerate() {
            let start = t.max(done[s]);
            if s == 0 {
                enter = start;
            }
            t = start + c;
            done[s] = t;
        }
        spans.push((enter, t));
    }
    let pipelined = done.last().copied().unwrap_or(0);
    let max_rows_in_flight = spans
        .iter()
        .map(|&(enter, _)| spans.iter().filter(|&&(e, l)| e <= enter && enter < l).count())
        .max()
        .unwrap_or(0);
    Ok(IntraLayerResult {
        pipelined,
        sequential,
        max_rows_in_flight,
    })
}

/// `T_MHA + (jobs - 1) * max(T_MHA, T_FFN) + T_FFN`.
pub fn inter_layer_total(t_mha: u64, t_ffn: u64, jobs: u64) -> u64 {
    t_mha + jobs.saturating_sub(1) * t_mha.max(t_ffn) + t_ffn
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledJob {
    pub sample: usize,
    pub layer: usize,
    /// 0 for MHA, 1 for FFN.
    pub module: usize,
    pub start: u64,
    pub end: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterLayerResult {
    pub total_cycles: u64,
    pub jobs: Vec<ScheduledJob>,
}

/// Event simulation of the MHA and FFN modules shared by `batch` samples.
/// Each sample runs MHA then FFN per layer in order; a free module takes
/// the earliest-startable job, preferring lower layer then lower sample.
pub fn run_inter_layer_pipeline(t_mha: &[u64], t_ffn: &[u64], batch: usize) -> Result<InterLayerResult> {
    let layers = t_mha.len();
    if layers == 0 || t_ffn.len() != layers {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty per-layer times, got {} and {}",
            t_mha.len(),
            t_ffn.len()
        )));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be at least 1".into()));
    }
    // Per sample: index of the next op (2 per layer) and when it is ready.
    let mut next = vec![0usize; batch];
    let mut ready = vec![0u64; batch];
    let mut module_free = [0u64; 2];
    let mut jobs = Vec::with_capacity(2 * layers * batch);
    let total_ops = 2 * layers;
    loop {
        let mut best: Option<(u64, usize, usize, usize)> = None;
        for s in 0..batch {
            if next[s] == total_ops {
                continue;
            }
            let (layer, module) = (next[s] / 2, next[s] % 2);
            let start = ready[s].max(module_free[module]);
            let key = (start, module, layer, s);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        let Some((start, module, layer, s)) = best else {
            break;
        };
        let dur = if module == 0 { t_mha[layer] } else { t_ffn[layer] };
        let end = start + dur;
        module_free[module] = end;
        ready[s] = end;
        next[s] += 1;
        jobs.push(ScheduledJob {
            sample: s,
            layer,
            module,
            start,
            end,
        });
    }
    let total_cycles = jobs.iter().map(|j| j.end).max().unwrap_or(0);
    Ok(InterLayerResult { total_cycles, jobs })
}
