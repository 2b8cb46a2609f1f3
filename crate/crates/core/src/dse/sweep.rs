//! Exhaustive evaluation of a design space.
//!
//! Accuracy and robustness depend only on the model configuration and each
//! module's latency only on its own engine, so both are computed once per
//! key (in parallel) and combined per `(model, MHA, FFN)` tuple in a single
//! ordered pass. That pass also keeps, for every model configuration, the
//! feasible tuples of minimum latency: every other tuple of the same model
//! is dominated by them, so the Pareto set over these candidates equals the
//! Pareto set over all points.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::accuracy::{MetricProvider, ModelMetrics, Provenance};
use super::pareto::{pareto_filter, select_under_constraints, upper_quartile, RobustnessRule};
use super::{inf_sentinel, DesignPoint, DesignSpace};
use crate::error::{Error, Result};
use crate::refmodel::ModelConfig;
use crate::simulator::{inter_layer_total, estimate_resources, module_latency, HwConfig, Module, CLOCK_HZ};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Constraints {
    /// Allowed accuracy loss against the provider's baseline, as a fraction.
    pub max_accuracy_loss: f64,
    /// Absolute floor; overrides `max_accuracy_loss` when set.
    pub accuracy_floor: Option<f64>,
    /// Require robustness strictly above the upper quartile of all points.
    pub robustness_upper_quartile: bool,
}

impl Default for Constraints {
    fn default() -> Self {
        Constraints {
            max_accuracy_loss: 0.01,
            accuracy_floor: None,
            robustness_upper_quartile: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub points_evaluated: u64,
    pub feasible_points: u64,
    pub accuracy_floor: f64,
    #[serde(with = "inf_sentinel")]
    pub robustness_threshold: Option<f64>,
    pub model_metrics: Vec<(ModelConfig, ModelMetrics)>,
    /// Minimum-latency feasible tuples of each model configuration.
    pub candidates: Vec<DesignPoint>,
    pub pareto: Vec<DesignPoint>,
    pub selection: Option<DesignPoint>,
    /// Why nothing was selected.
    pub diagnostics: String,
}

type Latencies = Vec<std::result::Result<u64, String>>;

fn module_latencies(models: &[ModelConfig], hws: &[HwConfig], module: Module) -> Vec<Latencies> {
    models
        .par_iter()
        .map(|cfg| {
            hws.iter()
                .map(|hw| module_latency(module, cfg, hw).map_err(|e| e.to_string()))
                .collect()
        })
        .collect()
}

/// Evaluate every tuple of `space`. `sink` sees each point once, in
/// enumeration order (model, then MHA engine, then FFN engine).
pub fn sweep(
    space: &DesignSpace,
    provider: &dyn MetricProvider,
    constraints: &Constraints,
    workers: usize,
    mut sink: impl FnMut(&DesignPoint) -> Result<()>,
) -> Result<SweepOutcome> {
    space.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let models = space.model_configs();
    let hws = space.hw_configs();
    let (metrics, mha, ffn) = pool.install(|| {
        let metrics: Vec<ModelMetrics> = models.par_iter().map(|m| provider.evaluate(m)).collect();
        let mha = module_latencies(&models, &hws, Module::Mha);
        let ffn = module_latencies(&models, &hws, Module::Ffn);
        (metrics, mha, ffn)
    });
    for (cfg, m) in models.iter().zip(&metrics) {
        if !m.status.is_empty() {
            log::warn!("{} {} {} W1A{}: {}", cfg.model_kind, cfg.d_hid, cfg.d_inter, cfg.b_act, m.status);
        }
    }
    let resources: Vec<Vec<_>> = hws
        .iter()
        .map(|a| hws.iter().map(|b| estimate_resources(a, b)).collect())
        .collect();
    let jobs = (space.batch * space.layers) as u64;
    let n_hw = hws.len() as u64;

    let mut evaluated = 0u64;
    let mut feasible = 0u64;
    let mut candidates = Vec::new();
    let mut weighted_rob = Vec::new();
    for (mi, cfg) in models.iter().enumerate() {
        let mm = &metrics[mi];
        if let Some(r) = mm.robustness {
            weighted_rob.push((r, n_hw * n_hw));
        }
        let mut best: Option<u64> = None;
        let mut best_points: Vec<DesignPoint> = Vec::new();
        for (a, hw_a) in hws.iter().enumerate() {
            for (b, hw_b) in hws.iter().enumerate() {
                let res = resources[a][b];
                let (latency, status) = match (&mha[mi][a], &ffn[mi][b]) {
                    (Ok(m), Ok(f)) => (Some(inter_layer_total(*m, *f, jobs)), mm.status.clone()),
                    (Err(e), _) => (None, format!("mha: {e}")),
                    (_, Err(e)) => (None, format!("ffn: {e}")),
                };
                let p = DesignPoint {
                    model: *cfg,
                    mha: *hw_a,
                    ffn: *hw_b,
                    accuracy: mm.accuracy,
                    accuracy_src: mm.accuracy_src,
                    robustness: mm.robustness,
                    robustness_src: mm.robustness_src,
                    latency_cycles: latency,
                    latency_ms: latency.map(|c| c as f64 / CLOCK_HZ * 1e3),
                    resources: res,
                    resource_feasible: res.fits(),
                    status,
                };
                evaluated += 1;
                sink(&p)?;
                if !p.feasible() {
                    continue;
                }
                feasible += 1;
                let lat = p.latency_cycles.expect("feasible points have a latency");
                match best {
                    Some(l) if lat > l => {}
                    Some(l) if lat == l => best_points.push(p),
                    _ => {
                        best = Some(lat);
                        best_points.clear();
                        best_points.push(p);
                    }
                }
            }
        }
        candidates.extend(best_points);
    }

    let accuracy_floor = match constraints.accuracy_floor {
        Some(f) => f,
        None => provider.baseline_accuracy()? - constraints.max_accuracy_loss,
    };
    let robustness_threshold = if constraints.robustness_upper_quartile {
        upper_quartile(&weighted_rob)
    } else {
        None
    };
    let rule = match robustness_threshold {
        Some(t) => RobustnessRule::Above(t),
        None => RobustnessRule::None,
    };
    let pareto = pareto_filter(&candidates);
    let (selection, diagnostics) = match select_under_constraints(&pareto, accuracy_floor, rule) {
        Ok(p) => (Some(p), String::new()),
        Err(e) => (None, e.to_string()),
    };
    Ok(SweepOutcome {
        points_evaluated: evaluated,
        feasible_points: feasible,
        accuracy_floor,
        robustness_threshold,
        model_metrics: models.into_iter().zip(metrics).collect(),
        candidates,
        pareto,
        selection,
        diagnostics,
    })
}

/// Frozen column layout of `points.csv`, version 1.
#[derive(Serialize)]
struct CsvRow<'a> {
    model_kind: String,
    d_hid: usize,
    d_inter: usize,
    b_act: u32,
    mha_p_dpu: usize,
    mha_p_quan: usize,
    mha_p_vu: usize,
    mha_p_ln: usize,
    ffn_p_dpu: usize,
    ffn_p_quan: usize,
    ffn_p_vu: usize,
    ffn_p_ln: usize,
    accuracy: Option<f64>,
    accuracy_src: Provenance,
    robustness: Option<String>,
    robustness_src: Provenance,
    latency_cycles: Option<u64>,
    latency_ms: Option<f64>,
    latency_src: Provenance,
    lut: f64,
    ff: f64,
    bram: f64,
    dsp: f64,
    resource_src: Provenance,
    resource_feasible: bool,
    feasible: bool,
    status: &'a str,
}

impl<'a> CsvRow<'a> {
    fn new(p: &'a DesignPoint) -> Self {
        CsvRow {
            model_kind: p.model.model_kind.to_string(),
            d_hid: p.model.d_hid,
            d_inter: p.model.d_inter,
            b_act: p.model.b_act,
            mha_p_dpu: p.mha.p_dpu,
            mha_p_quan: p.mha.p_quan,
            mha_p_vu: p.mha.p_vu,
            mha_p_ln: p.mha.p_ln,
            ffn_p_dpu: p.ffn.p_dpu,
            ffn_p_quan: p.ffn.p_quan,
            ffn_p_vu: p.ffn.p_vu,
            ffn_p_ln: p.ffn.p_ln,
            accuracy: p.accuracy,
            accuracy_src: p.accuracy_src,
            robustness: p.robustness.map(inf_sentinel::to_text),
            robustness_src: p.robustness_src,
            latency_cycles: p.latency_cycles,
            latency_ms: p.latency_ms,
            latency_src: if p.latency_cycles.is_some() {
                Provenance::Analytic
            } else {
                Provenance::Unavailable
            },
            lut: p.resources.lut,
            ff: p.resources.ff,
            bram: p.resources.bram,
            dsp: p.resources.dsp,
            resource_src: Provenance::Analytic,
            resource_feasible: p.resource_feasible,
            feasible: p.feasible(),
            status: &p.status,
        }
    }
}

#[derive(Serialize)]
struct Algorithmic {
    model_kind: String,
    d_hid: usize,
    d_inter: usize,
    b_act: u32,
}

#[derive(Serialize)]
struct Engine {
    p_dpu: usize,
    p_quan: usize,
    p_vu: usize,
    p_ln: usize,
}

impl From<&HwConfig> for Engine {
    fn from(h: &HwConfig) -> Self {
        Engine {
            p_dpu: h.p_dpu,
            p_quan: h.p_quan,
            p_vu: h.p_vu,
            p_ln: h.p_ln,
        }
    }
}

#[derive(Serialize)]
struct SelectionFile<'a> {
    selected: bool,
    algorithmic: Option<Algorithmic>,
    mha: Option<Engine>,
    ffn: Option<Engine>,
    point: Option<&'a DesignPoint>,
    accuracy_floor: f64,
    #[serde(with = "inf_sentinel")]
    robustness_threshold: Option<f64>,
    points_evaluated: u64,
    feasible_points: u64,
    pareto_points: usize,
    diagnostics: &'a str,
}

/// Run the sweep and write `points.csv`, `pareto.json` and
/// `selection.json` into `dir`.
pub fn write_artifacts(
    dir: &Path,
    space: &DesignSpace,
    provider: &dyn MetricProvider,
    constraints: &Constraints,
    workers: usize,
) -> Result<SweepOutcome> {
    std::fs::create_dir_all(dir)?;
    let mut csv = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("points.csv"))?));
    let outcome = sweep(space, provider, constraints, workers, |p| {
        csv.serialize(CsvRow::new(p))
            .map_err(|e| Error::Io(std::io::Error::other(e)))
    })?;
    csv.flush()?;

    write_file(&dir.join("pareto.json"), &to_json(&outcome.pareto)?)?;
    let sel = outcome.selection.as_ref();
    let file = SelectionFile {
        selected: sel.is_some(),
        algorithmic: sel.map(|p| Algorithmic {
            model_kind: p.model.model_kind.to_string(),
            d_hid: p.model.d_hid,
            d_inter: p.model.d_inter,
            b_act: p.model.b_act,
        }),
        mha: sel.map(|p| Engine::from(&p.mha)),
        ffn: sel.map(|p| Engine::from(&p.ffn)),
        point: sel,
        accuracy_floor: outcome.accuracy_floor,
        robustness_threshold: outcome.robustness_threshold,
        points_evaluated: outcome.points_evaluated,
        feasible_points: outcome.feasible_points,
        pareto_points: outcome.pareto.len(),
        diagnostics: &outcome.diagnostics,
    };
    write_file(&dir.join("selection.json"), &to_json(&file)?)?;
    Ok(outcome)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(bytes)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dse::accuracy::LookupProvider;
    use crate::refmodel::ModelKind;

    #[test]
    fn demo_sweep_counts_and_selection() {
        let space = DesignSpace::demo();
        let mut seen = 0u64;
        let out = sweep(&space, &LookupProvider::default(), &Constraints::default(), 2, |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(out.points_evaluated, 8 * 16 * 16);
        assert_eq!(seen, out.points_evaluated);
        assert!(out.feasible_points > 0);
        assert!(!out.pareto.is_empty());
        // Pareto points are all candidates, and no candidate dominates one.
        for p in &out.pareto {
            assert!(out.candidates.contains(p));
        }
        let sel = out.selection.expect("selection");
        assert_eq!(sel.model.model_kind, ModelKind::BMT);
    }

    #[test]
    fn empty_window_reports_diagnostics() {
        let c = Constraints {
            accuracy_floor: Some(0.99),
            ..Constraints::default()
        };
        let out = sweep(&DesignSpace::demo(), &LookupProvider::default(), &c, 1, |_| Ok(())).unwrap();
        assert!(out.selection.is_none());
        assert!(out.diagnostics.contains("nearest misses"));
    }

    #[test]
    fn artifacts_identical_across_worker_counts() {
        let space = DesignSpace::demo();
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for (d, w) in dirs.iter().zip([1, 8]) {
            write_artifacts(d.path(), &space, &LookupProvider::default(), &Constraints::default(), w).unwrap();
        }
        for f in ["points.csv", "pareto.json", "selection.json"] {
            let a = std::fs::read(dirs[0].path().join(f)).unwrap();
            let b = std::fs::read(dirs[1].path().join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
    }
}
