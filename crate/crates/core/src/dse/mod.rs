//! Grid search over model and accelerator parameters, Pareto filtering and
//! constrained selection.

pub mod accuracy;
pub mod pareto;
pub mod sweep;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refmodel::{ModelConfig, ModelKind, DEFAULT_NUM_HEAD};
use crate::simulator::{HwConfig, ResourceEstimate, DEFAULT_BATCH};

pub use accuracy::{LiveProvider, LookupProvider, MetricProvider, ModelMetrics, Provenance, TABLE};
pub use pareto::{pareto_filter, select_under_constraints, upper_quartile, Objectives, RobustnessRule};
pub use sweep::{sweep, write_artifacts, Constraints, SweepOutcome};

/// Clean accuracy over the spread of perturbed accuracies. Identical runs
/// give `+inf`, which compares above every finite value.
pub fn robustness(runs: &[f64], a0: f64) -> f64 {
    let n = runs.len().max(1) as f64;
    let var = runs.iter().map(|a| (a - a0).powi(2)).sum::<f64>() / n;
    let dev = var.sqrt();
    if dev == 0.0 {
        f64::INFINITY
    } else {
        a0 / dev
    }
}

/// Axes of the search. Every list is swept independently for the MHA and
/// FFN engines; `hw_base` supplies the parameters that are not swept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignSpace {
    pub model_kinds: Vec<ModelKind>,
    pub d_hid: Vec<usize>,
    pub d_inter: Vec<usize>,
    /// Restricts activation widths; each kind still only uses its legal ones.
    pub b_act: Option<Vec<u32>>,
    pub p_dpu: Vec<usize>,
    pub p_quan: Vec<usize>,
    pub p_vu: Vec<usize>,
    pub p_ln: Vec<usize>,
    pub layers: usize,
    pub seq_len: usize,
    pub num_head: usize,
    pub batch: usize,
    pub hw_base: HwConfig,
}

impl Default for DesignSpace {
    fn default() -> Self {
        DesignSpace {
            model_kinds: ModelKind::ALL.to_vec(),
            d_hid: vec![192, 384, 768],
            d_inter: vec![768, 1536, 3072],
            b_act: None,
            p_dpu: vec![8, 16, 32, 48, 64, 96],
            p_quan: vec![32, 64, 128],
            p_vu: vec![32, 64, 96, 128, 160],
            p_ln: vec![8, 16, 32, 48],
            layers: 12,
            seq_len: 128,
            num_head: DEFAULT_NUM_HEAD,
            batch: DEFAULT_BATCH,
            hw_base: HwConfig::default(),
        }
    }
}

impl DesignSpace {
    /// Small subset for demos and tests: 8 model configs, 16 engines each.
    pub fn demo() -> Self {
        DesignSpace {
            model_kinds: vec![ModelKind::BMT, ModelKind::BinaryBERT],
            d_hid: vec![192, 384],
            d_inter: vec![1536],
            p_dpu: vec![16, 64],
            p_quan: vec![64, 128],
            p_vu: vec![32, 96],
            p_ln: vec![8, 16],
            ..DesignSpace::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("d_hid", self.d_hid.len()),
            ("d_inter", self.d_inter.len()),
            ("p_dpu", self.p_dpu.len()),
            ("p_quan", self.p_quan.len()),
            ("p_vu", self.p_vu.len()),
            ("p_ln", self.p_ln.len()),
            ("model_kinds", self.model_kinds.len()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Config(format!("design space axis {name} is empty")));
        }
        if self.batch == 0 || self.layers == 0 {
            return Err(Error::Config("batch and layers must be positive".into()));
        }
        for cfg in self.model_configs() {
            cfg.validate()?;
        }
        if self.model_configs().is_empty() {
            return Err(Error::Config("no legal activation width in the design space".into()));
        }
        for hw in self.hw_configs() {
            hw.validate()?;
        }
        Ok(())
    }

    /// Algorithmic configurations in enumeration order.
    pub fn model_configs(&self) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for &kind in &self.model_kinds {
            for &b in kind.act_bits() {
                if self.b_act.as_ref().is_some_and(|allowed| !allowed.contains(&b)) {
                    continue;
                }
                for &d_hid in &self.d_hid {
                    for &d_inter in &self.d_inter {
                        out.push(ModelConfig {
                            layers: self.layers,
                            d_hid,
                            d_inter,
                            num_head: self.num_head,
                            b_act: b,
                            model_kind: kind,
                            seq_len: self.seq_len,
                        });
                    }
                }
            }
        }
        out
    }

    /// Engine configurations for one module, in enumeration order.
    pub fn hw_configs(&self) -> Vec<HwConfig> {
        let mut out = Vec::new();
        for &p_dpu in &self.p_dpu {
            for &p_quan in &self.p_quan {
                for &p_vu in &self.p_vu {
                    for &p_ln in &self.p_ln {
                        out.push(HwConfig {
                            p_dpu,
                            p_quan,
                            p_vu,
                            p_ln,
                            ..self.hw_base
                        });
                    }
                }
            }
        }
        out
    }
}

/// One evaluated `(model, MHA engine, FFN engine)` tuple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub model: ModelConfig,
    pub mha: HwConfig,
    pub ffn: HwConfig,
    /// Fraction in `[0, 1]`.
    pub accuracy: Option<f64>,
    pub accuracy_src: Provenance,
    #[serde(with = "inf_sentinel")]
    pub robustness: Option<f64>,
    pub robustness_src: Provenance,
    pub latency_cycles: Option<u64>,
    pub latency_ms: Option<f64>,
    pub resources: ResourceEstimate,
    pub resource_feasible: bool,
    /// Empty when every metric evaluated, otherwise the first failure.
    pub status: String,
}

impl DesignPoint {
    pub fn feasible(&self) -> bool {
        self.accuracy.is_some() && self.robustness.is_some() && self.latency_cycles.is_some() && self.resource_feasible
    }

    /// Total order on parameters, used to break ties.
    pub fn key(&self) -> (u8, u32, usize, usize, [usize; 4], [usize; 4]) {
        let hw = |h: &HwConfig| [h.p_dpu, h.p_quan, h.p_vu, h.p_ln];
        (
            self.model.model_kind.code(),
            self.model.b_act,
            self.model.d_hid,
            self.model.d_inter,
            hw(&self.mha),
            hw(&self.ffn),
        )
    }
}

/// Robustness values serialize as numbers, with `+inf` as the string "inf".
pub mod inf_sentinel {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn to_text(v: f64) -> String {
        if v == f64::INFINITY {
            "inf".into()
        } else {
            format!("{v}")
        }
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if *x == f64::INFINITY => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_none(),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(x)) => Ok(Some(x)),
            Some(Raw::Str(s)) if s == "inf" => Ok(Some(f64::INFINITY)),
            Some(Raw::Str(s)) => Err(de::Error::custom(format!("bad robustness {s:?}"))),
        }
    }
}
