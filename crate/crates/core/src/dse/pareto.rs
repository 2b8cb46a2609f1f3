//! Non-dominated filtering and constrained selection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::DesignPoint;
use crate::error::{Error, Result};

/// Accuracy and robustness are maximized, latency minimized.
pub trait Objectives {
    fn accuracy(&self) -> f64;
    fn robustness(&self) -> f64;
    fn latency(&self) -> f64;
}

impl Objectives for DesignPoint {
    fn accuracy(&self) -> f64 {
        self.accuracy.unwrap_or(f64::NEG_INFINITY)
    }
    fn robustness(&self) -> f64 {
        self.robustness.unwrap_or(f64::NEG_INFINITY)
    }
    fn latency(&self) -> f64 {
        self.latency_cycles.map_or(f64::INFINITY, |c| c as f64)
    }
}

impl Objectives for (f64, f64, f64) {
    fn accuracy(&self) -> f64 {
        self.0
    }
    fn robustness(&self) -> f64 {
        self.1
    }
    fn latency(&self) -> f64 {
        self.2
    }
}

/// `true` when `q` dominates `p`.
pub fn dominates<T: Objectives>(q: &T, p: &T) -> bool {
    let ge = q.accuracy() >= p.accuracy() && q.robustness() >= p.robustness() && q.latency() <= p.latency();
    let gt = q.accuracy() > p.accuracy() || q.robustness() > p.robustness() || q.latency() < p.latency();
    ge && gt
}

fn by_latency_then_accuracy<T: Objectives>(a: &T, b: &T) -> Ordering {
    a.latency()
        .total_cmp(&b.latency())
        .then(b.accuracy().total_cmp(&a.accuracy()))
        .then(b.robustness().total_cmp(&a.robustness()))
}

/// Non-dominated subset, sorted by latency, then descending accuracy and
/// robustness; remaining ties keep their input order.
pub fn pareto_filter<T: Objectives + Clone>(points: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| by_latency_then_accuracy(&points[a], &points[b]));
    let mut front: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        // Group of equal latency.
        let lat = points[order[i]].latency();
        let mut j = i;
        while j < order.len() && points[order[j]].latency().total_cmp(&lat) == Ordering::Equal {
            j += 1;
        }
        let group = &order[i..j];
        let survivors: Vec<usize> = group
            .iter()
            .copied()
            .filter(|&p| {
                // Members of the front already have lower latency; a
                // dominating point is either there or in this group.
                !front.iter().any(|&q| dominates(&points[q], &points[p]))
                    && !group.iter().any(|&q| dominates(&points[q], &points[p]))
            })
            .collect();
        front.extend(survivors);
        i = j;
    }
    front.into_iter().map(|k| points[k].clone()).collect()
}

/// Robustness constraint applied during selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustnessRule {
    None,
    /// Strictly above the threshold; `+inf` always passes.
    Above(f64),
}

impl RobustnessRule {
    pub fn passes(&self, r: f64) -> bool {
        match self {
            RobustnessRule::None => true,
            RobustnessRule::Above(t) => r == f64::INFINITY || r > *t,
        }
    }
}

/// Type-7 upper quartile of a weighted multiset of finite values.
/// Infinite values are skipped. Returns `None` when nothing finite remains.
pub fn upper_quartile(values: &[(f64, u64)]) -> Option<f64> {
    let mut v: Vec<(f64, u64)> = values.iter().copied().filter(|(x, c)| x.is_finite() && *c > 0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n: u64 = v.iter().map(|(_, c)| c).sum();
    let h = (n - 1) as f64 * 0.75;
    let lo = h.floor() as u64;
    let frac = h - lo as f64;
    let at = |idx: u64| {
        let mut seen = 0u64;
        for &(x, c) in &v {
            seen += c;
            if idx < seen {
                return x;
            }
        }
        v.last().expect("non-empty").0
    };
    let a = at(lo);
    let b = at((lo + 1).min(n - 1));
    Some(a + frac * (b - a))
}

/// Minimum-latency point meeting both constraints; ties go to higher
/// accuracy, then the smaller parameter key.
pub fn select_under_constraints(pareto: &[DesignPoint], acc_floor: f64, rule: RobustnessRule) -> Result<DesignPoint> {
    if pareto.is_empty() {
        return Err(Error::NoFeasiblePoint("the Pareto set is empty".into()));
    }
    let acc_ok: Vec<&DesignPoint> = pareto.iter().filter(|p| p.accuracy() >= acc_floor).collect();
    let both: Vec<&DesignPoint> = acc_ok.iter().copied().filter(|p| rule.passes(p.robustness())).collect();
    if let Some(best) = both.iter().copied().min_by(|a, b| {
        a.latency()
            .total_cmp(&b.latency())
            .then(b.accuracy().total_cmp(&a.accuracy()))
            .then(a.key().cmp(&b.key()))
    }) {
        return Ok(best.clone());
    }
    let best_acc = pareto
        .iter()
        .max_by(|a, b| a.accuracy().total_cmp(&b.accuracy()))
        .expect("non-empty");
    let best_rob = pareto
        .iter()
        .max_by(|a, b| a.robustness().total_cmp(&b.robustness()))
        .expect("non-empty");
    Err(Error::NoFeasiblePoint(format!(
        "{} Pareto points, {} meet accuracy >= {acc_floor:.4}, none also meet {rule:?}; \
         nearest misses: best accuracy {:.4} ({} {} {} W1A{}), best robustness {} ({} {} {} W1A{})",
        pareto.len(),
        acc_ok.len(),
        best_acc.accuracy(),
        best_acc.model.model_kind,
        best_acc.model.d_hid,
        best_acc.model.d_inter,
        best_acc.model.b_act,
        super::inf_sentinel::to_text(best_rob.robustness()),
        best_rob.model.model_kind,
        best_rob.model.d_hid,
        best_rob.model.d_inter,
        best_rob.model.b_act,
    )))
}
