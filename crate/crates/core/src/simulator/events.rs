//! Row-granular event engine shared by every pipelined phase.
//!
//! Each unit is a single server. A task (one row through one stage) holds
//! its unit for `occupancy` cycles and its result is visible to the next
//! stage `latency` cycles after that. When a unit frees up it picks the
//! ready task of the latest stage, then the lowest row. Events at equal
//! times are processed in unit-id order.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Dma,
    Qu,
    Qmm,
    Vu,
    Ln,
    Smx,
}

impl Unit {
    pub const ALL: [Unit; 6] = [Unit::Dma, Unit::Qu, Unit::Qmm, Unit::Vu, Unit::Ln, Unit::Smx];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Unit::Dma => "dma",
            Unit::Qu => "qu",
            Unit::Qmm => "qmm",
            Unit::Vu => "vu",
            Unit::Ln => "ln",
            Unit::Smx => "smx",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub unit: Unit,
    pub occupancy: u64,
    pub latency: u64,
}

impl Stage {
    pub fn new(name: &str, unit: Unit, occupancy: u64, latency: u64) -> Self {
        Stage {
            name: name.to_string(),
            unit,
            occupancy,
            latency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainOutcome {
    /// Completion time of the last task, including the start offset.
    pub end: u64,
    /// Busy cycles per unit, indexed by [`Unit::id`].
    pub busy: [u64; 6],
    pub max_in_flight: usize,
}

/// Busy cycles each unit spends per row.
pub fn unit_loads(stages: &[Stage]) -> [u64; 6] {
    let mut load = [0u64; 6];
    for s in stages {
        load[s.unit.id()] += s.occupancy;
    }
    load
}

/// Run `rows` rows through `stages` starting at `start`. At most `window`
/// rows may be between entering the first stage and leaving the last.
pub fn run_chain(stages: &[Stage], rows: usize, start: u64, window: usize) -> ChainOutcome {
    let mut busy = [0u64; 6];
    if stages.is_empty() || rows == 0 {
        return ChainOutcome {
            end: start,
            busy,
            max_in_flight: 0,
        };
    }
    let window = window.max(1);
    let n_stages = stages.len();
    // ready[u]: (stage, row) tasks whose inputs are available, for unit u.
    let mut ready: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 6];
    let mut unit_free = [start; 6];
    // Pending completions: (time, kind, unit or stage, row).
    let mut events: BinaryHeap<Reverse<(u64, usize, usize, usize)>> = BinaryHeap::new();
    let first_unit = stages[0].unit.id();
    let mut next_row = 0usize;
    let mut in_flight = 0usize;
    let mut max_in_flight = 0usize;
    let mut done = 0usize;
    let mut end = start;
    let mut now = start;

    loop {
        // Admit new rows into the first stage while the window allows.
        while next_row < rows && in_flight + ready[first_unit].iter().filter(|t| t.0 == 0).count() < window {
            ready[first_unit].push((0, next_row));
            next_row += 1;
        }
        // Start work on every idle unit, in unit-id order.
        let mut started = true;
        while started {
            started = false;
            for u in 0..6 {
                if unit_free[u] > now || ready[u].is_empty() {
                    continue;
                }
                let pick = ready[u]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
                    .map(|(i, _)| i)
                    .expect("non-empty");
                let (stage, row) = ready[u].swap_remove(pick);
                if stage == 0 {
                    in_flight += 1;
                    max_in_flight = max_in_flight.max(in_flight);
                }
                let st = &stages[stage];
                busy[u] += st.occupancy;
                unit_free[u] = now + st.occupancy;
                let finish = now + st.occupancy + st.latency;
                events.push(Reverse((finish, 1, stage, row)));
                if st.occupancy > 0 {
                    events.push(Reverse((unit_free[u], 0, u, 0)));
                }
                started = true;
                // Freed units may admit more rows.
                while next_row < rows
                    && in_flight + ready[first_unit].iter().filter(|t| t.0 == 0).count() < window
                {
                    ready[first_unit].push((0, next_row));
                    next_row += 1;
                }
            }
        }
        let Some(Reverse((t, _, _, _))) = events.peek().copied() else {
            break;
        };
        now = t;
        while let Some(Reverse((t, kind, a, row))) = events.peek().copied() {
            if t != now {
                break;
            }
            events.pop();
            if kind == 1 {
                let stage = a;
                if stage + 1 < n_stages {
                    ready[stages[stage + 1].unit.id()].push((stage + 1, row));
                } else {
                    in_flight -= 1;
                    done += 1;
                    end = end.max(t);
                }
            }
        }
    }
    debug_assert_eq!(done, rows);
    ChainOutcome {
        end,
        busy,
        max_in_flight,
    }
}

/// Closed form for the same chain: start + one row's latency through every
/// stage + the remaining rows at the rate of the most loaded unit.
pub fn chain_analytic(stages: &[Stage], rows: usize, start: u64) -> u64 {
    if stages.is_empty() || rows == 0 {
        return start;
    }
    let fill: u64 = stages.iter().map(|s| s.occupancy + s.latency).sum();
    let bottleneck = unit_loads(stages).into_iter().max().unwrap_or(0);
    start + fill + (rows as u64 - 1) * bottleneck
}
