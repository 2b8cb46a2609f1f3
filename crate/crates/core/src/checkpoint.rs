//! Latent (pre-binarization) checkpoints and their conversion to deployable
//! binarized weights.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::f16::{f16_round, F16};
use crate::quantize::bwn_binarize;
use crate::refmodel::{ClassifierHead, EncoderWeights, LayerWeights, Linear, ModelConfig, QuantSites};
use crate::rng::Rng;
use crate::wtws::{split_latent, ternarize, ExactBinWeight, SplitLayer};

pub const LINEAR_NAMES: [&str; 6] = ["wq", "wk", "wv", "wo", "wc", "wr1"];

#[derive(Clone, Debug, PartialEq)]
pub struct LatentLinear {
    /// Ternarize and split into two binary halves; otherwise binarize directly.
    pub split: bool,
    pub weight: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentLayer {
    /// In [`LINEAR_NAMES`] order.
    pub linears: Vec<LatentLinear>,
    pub ln1_gain: Vec<F16>,
    pub ln1_bias: Vec<F16>,
    pub ln2_gain: Vec<F16>,
    pub ln2_bias: Vec<F16>,
    pub sites: QuantSites,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCheckpoint {
    pub cfg: ModelConfig,
    pub layers: Vec<LatentLayer>,
    pub head: Option<ClassifierHead>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitRecord {
    pub layer: usize,
    pub linear: &'static str,
    pub split: bool,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `max |binarize(W1) + binarize(W2) - ternary|`.
    pub residual: f64,
    /// The ternary weight has no zeros, so `b` fell back to 0.
    pub no_zeros: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitReport {
    pub records: Vec<SplitRecord>,
    pub max_residual: f64,
}

fn split_one(w: &Array2<f64>) -> Result<(Linear, f64, f64, f64, bool)> {
    let t = ternarize(w)?;
    let halves = split_latent(&t)?;
    let mut layer = SplitLayer {
        w1: ExactBinWeight::binarize(&halves.w1)?,
        w2: ExactBinWeight::binarize(&halves.w2)?,
        sigma1: Vec::new(),
        sigma2: Vec::new(),
    };
    let cols = w.ncols();
    layer.set_sigma(vec![1.0; cols], vec![1.0; cols])?;
    let residual = layer.identity_residual(&t.ternary);
    let no_zeros = t.ternary.iter().all(|&v| v != 0.0);
    Ok((Linear::Split(layer.to_deployed()?), halves.a, halves.b, residual, no_zeros))
}

/// Convert every linear layer. All degenerate layers are reported together.
pub fn split_checkpoint(ck: &LatentCheckpoint) -> Result<(EncoderWeights, SplitReport)> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut layers = Vec::with_capacity(ck.layers.len());
    for (li, layer) in ck.layers.iter().enumerate() {
        if layer.linears.len() != LINEAR_NAMES.len() {
            return Err(Error::ShapeMismatch(format!(
                "layer {li} has {} linear layers, expected {}",
                layer.linears.len(),
                LINEAR_NAMES.len()
            )));
        }
        let mut lins = Vec::with_capacity(6);
        for (lin, name) in layer.linears.iter().zip(LINEAR_NAMES) {
            if !lin.split {
                match bwn_binarize(&lin.weight) {
                    Ok(b) => lins.push(Linear::Binary(b)),
                    Err(e) => failures.push(format!("layer {li} {name}: {e}")),
                }
                records.push(SplitRecord {
                    layer: li,
                    linear: name,
                    split: false,
                    a: None,
                    b: None,
                    residual: 0.0,
                    no_zeros: false,
                });
                continue;
            }
            match split_one(&lin.weight) {
                Ok((l, a, b, residual, no_zeros)) => {
                    if no_zeros {
                        log::warn!("layer {li} {name}: ternary weight has no zeros, b set to 0");
                    }
                    lins.push(l);
                    records.push(SplitRecord {
                        layer: li,
                        linear: name,
                        split: true,
                        a: Some(a),
                        b: Some(b),
                        residual,
                        no_zeros,
                    });
                }
                Err(e) => failures.push(format!("layer {li} {name}: {e}")),
            }
        }
        if !failures.is_empty() {
            continue;
        }
        let mut it = lins.into_iter();
        let mut next = || it.next().expect("six linears");
        layers.push(LayerWeights {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            wc: next(),
            wr1: next(),
            ln1_gain: layer.ln1_gain.clone(),
            ln1_bias: layer.ln1_bias.clone(),
            ln2_gain: layer.ln2_gain.clone(),
            ln2_bias: layer.ln2_bias.clone(),
            sites: layer.sites,
        });
    }
    if !failures.is_empty() {
        return Err(Error::DegenerateWeight(failures.join("; ")));
    }
    let weights = EncoderWeights {
        layers,
        head: ck.head.clone(),
    };
    weights.check_shapes(&ck.cfg)?;
    let max_residual = records.iter().map(|r| r.residual).fold(0.0, f64::max);
    Ok((weights, SplitReport { records, max_residual }))
}

/// Gaussian latent weights with variance `1 / rows`.
pub fn random_latent_checkpoint(cfg: &ModelConfig, rng: &mut Rng, classes: Option<usize>) -> Result<LatentCheckpoint> {
    cfg.validate()?;
    let (d, i) = (cfg.d_hid, cfg.d_inter);
    let shapes = [(d, d), (d, d), (d, d), (d, d), (d, i), (i, d)];
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let linears = shapes
            .iter()
            .map(|&(r, c)| {
                let data = rng.gaussian(0.0, 1.0 / r as f64, r * c)?;
                Ok(LatentLinear {
                    split: true,
                    weight: Array2::from_shape_vec((r, c), data).expect("length matches"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut near = |c: f64| -> Vec<F16> { (0..d).map(|_| f16_round(c + rng.uniform_range(-0.1, 0.1))).collect() };
        layers.push(LatentLayer {
            linears,
            ln1_gain: near(1.0),
            ln1_bias: near(0.0),
            ln2_gain: near(1.0),
            ln2_bias: near(0.0),
            sites: QuantSites::standard(cfg.b_act)?,
        });
    }
    let head = classes.map(|c| ClassifierHead {
        weight: Array2::from_shape_fn((d, c), |_| f16_round(rng.uniform_range(-1.0, 1.0) / (d as f64).sqrt())),
        bias: vec![F16::ZERO; c],
    });
    Ok(LatentCheckpoint {
        cfg: *cfg,
        layers,
        head,
    })
}
