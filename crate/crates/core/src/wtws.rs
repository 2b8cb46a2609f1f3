//! Weighted ternary weight splitting.
//!
//! A ternary layer is split into two binary layers whose binarized sum
//! reproduces the ternary weights exactly. Each half is recombined through a
//! column-wise coefficient vector. All math here is offline and runs in
//! binary64; [`SplitLayer::to_deployed`] produces the binary16/binary32
//! parameters the accelerator consumes.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::f16::f16_round;
use crate::quantize::bwn_binarize_exact;
use crate::tensor::{BinWeight, SignMatrix};

/// Share of mean |W| used as the ternarization threshold.
pub const TERNARY_THRESHOLD: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct TernaryLayer {
    pub latent: Array2<f64>,
    /// Entries in `{-delta, 0, +delta}`.
    pub ternary: Array2<f64>,
    pub delta: f64,
}

/// Binarized matrix with a binary64 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactBinWeight {
    pub signs: SignMatrix,
    pub scale: f64,
}

impl ExactBinWeight {
    pub fn binarize(w: &Array2<f64>) -> Result<Self> {
        let (signs, scale) = bwn_binarize_exact(w)?;
        Ok(ExactBinWeight { signs, scale })
    }

    pub fn dequantize(&self) -> Array2<f64> {
        self.signs.to_i32().mapv(|s| s as f64 * self.scale)
    }
}

/// Latent halves produced by the splitting operator, before binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSplit {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitLayer {
    pub w1: ExactBinWeight,
    pub w2: ExactBinWeight,
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
}

/// Deployed form of a split layer: binary16 scales, binary32 coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitWeight {
    pub w1: BinWeight,
    pub w2: BinWeight,
    pub sigma1: Vec<f32>,
    pub sigma2: Vec<f32>,
}

impl SplitWeight {
    pub fn shape(&self) -> (usize, usize) {
        self.w1.shape()
    }
}

pub fn ternarize(latent: &Array2<f64>) -> Result<TernaryLayer> {
    if latent.is_empty() {
        return Err(Error::InvalidArgument("cannot ternarize an empty matrix".into()));
    }
    let n = latent.len() as f64;
    let mean_abs = latent.iter().map(|v| v.abs()).sum::<f64>() / n;
    let t = TERNARY_THRESHOLD * mean_abs;
    let (count, sum) = latent
        .iter()
        .filter(|v| v.abs() > t)
        .fold((0usize, 0.0f64), |(c, s), v| (c + 1, s + v.abs()));
    if count == 0 {
        return Err(Error::DegenerateTernary);
    }
    let delta = sum / count as f64;
    let ternary = latent.mapv(|v| {
        if v.abs() > t {
            delta.copysign(v)
        } else {
            0.0
        }
    });
    Ok(TernaryLayer {
        latent: latent.clone(),
        ternary,
        delta,
    })
}

/// Split the latent weights into two halves whose binarizations sum to the
/// ternary weights.
///
/// With `I` the non-zero ternary entries, `J` the zeroed entries with
/// positive latent and `K` the rest, the halves are
/// `(a W, (1-a) W)` on `I`, `(W + b, -b)` on `J` and `(b, W - b)` on `K`.
/// Equal half scales require `a = (S_I + S_K - S_J) / (2 S_I)` where `S_X`
/// is the sum of |W| over `X`. The commonly printed form swaps `S_J` and
/// `S_K` in that numerator, which breaks the identity; this follows the
/// identity.
pub fn split_latent(layer: &TernaryLayer) -> Result<LatentSplit> {
    let w = &layer.latent;
    let t = &layer.ternary;
    if w.dim() != t.dim() {
        return Err(Error::ShapeMismatch(format!(
            "latent {:?} vs ternary {:?}",
            w.dim(),
            t.dim()
        )));
    }
    let n = w.len() as f64;
    let (mut s_i, mut s_j, mut s_k) = (0.0f64, 0.0f64, 0.0f64);
    let mut n_jk = 0usize;
    let mut abs_total = 0.0f64;
    for (&wv, &tv) in w.iter().zip(t.iter()) {
        abs_total += wv.abs();
        if tv != 0.0 {
            s_i += wv.abs();
        } else {
            n_jk += 1;
            if wv > 0.0 {
                s_j += wv.abs();
            } else {
                s_k += wv.abs();
            }
        }
    }
    if s_i == 0.0 {
        return Err(Error::DegenerateTernary);
    }
    let a = (s_i + s_k - s_j) / (2.0 * s_i);
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::SplitDegenerate { a });
    }
    let b = if n_jk == 0 {
        log::warn!("ternary layer has no zero entries; using b = 0");
        0.0
    } else {
        (n * layer.delta - abs_total) / (2.0 * n_jk as f64)
    };

    let mut w1 = Array2::zeros(w.dim());
    let mut w2 = Array2::zeros(w.dim());
    for ((idx, &wv), &tv) in w.indexed_iter().zip(t.iter()) {
        let (h1, h2) = if tv != 0.0 {
            (a * wv, (1.0 - a) * wv)
        } else if wv > 0.0 {
            (wv + b, -b)
        } else {
            (b, wv - b)
        };
        w1[idx] = h1;
        w2[idx] = h2;
    }
    Ok(LatentSplit { w1, w2, a, b })
}

pub fn tws_split(layer: &TernaryLayer) -> Result<SplitLayer> {
    let halves = split_latent(layer)?;
    let w1 = ExactBinWeight::binarize(&halves.w1)?;
    let w2 = ExactBinWeight::binarize(&halves.w2)?;
    let cols = layer.latent.ncols();
    Ok(SplitLayer {
        w1,
        w2,
        sigma1: vec![1.0; cols],
        sigma2: vec![1.0; cols],
    })
}

impl SplitLayer {
    pub fn shape(&self) -> (usize, usize) {
        (self.w1.signs.rows(), self.w1.signs.cols())
    }

    pub fn set_sigma(&mut self, sigma1: Vec<f64>, sigma2: Vec<f64>) -> Result<()> {
        let cols = self.shape().1;
        if sigma1.len() != cols || sigma2.len() != cols {
            return Err(Error::ShapeMismatch(format!(
                "sigma lengths {} and {} for {cols} columns",
                sigma1.len(),
                sigma2.len()
            )));
        }
        self.sigma1 = sigma1;
        self.sigma2 = sigma2;
        Ok(())
    }

    /// Effective weight `dequant(w1) * sigma1 + dequant(w2) * sigma2`, column-wise.
    pub fn effective_weight(&self) -> Array2<f64> {
        let mut w = self.w1.dequantize();
        let w2 = self.w2.dequantize();
        for (j, (mut c1, c2)) in w
            .axis_iter_mut(Axis(1))
            .zip(w2.axis_iter(Axis(1)))
            .enumerate()
        {
            for (v1, v2) in c1.iter_mut().zip(c2.iter()) {
                *v1 = *v1 * self.sigma1[j] + v2 * self.sigma2[j];
            }
        }
        w
    }

    /// Largest elementwise deviation of `binarize(W1) + binarize(W2)` from
    /// the ternary weights.
    pub fn identity_residual(&self, ternary: &Array2<f64>) -> f64 {
        let sum = self.w1.dequantize() + self.w2.dequantize();
        sum.iter()
            .zip(ternary.iter())
            .map(|(s, t)| (s - t).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_deployed(&self) -> Result<SplitWeight> {
        let deploy = |w: &ExactBinWeight| -> Result<BinWeight> {
            let scale = f16_round(w.scale);
            if scale.to_f64() == 0.0 {
                return Err(Error::DegenerateWeight("split scale underflows binary16".into()));
            }
            Ok(BinWeight {
                signs: w.signs.clone(),
                scale,
            })
        };
        Ok(SplitWeight {
            w1: deploy(&self.w1)?,
            w2: deploy(&self.w2)?,
            sigma1: self.sigma1.iter().map(|&s| s as f32).collect(),
            sigma2: self.sigma2.iter().map(|&s| s as f32).collect(),
        })
    }
}

pub fn wtws_forward(x: &Array2<f64>, s: &SplitLayer) -> Result<Array2<f64>> {
    let (rows, _) = s.shape();
    if x.ncols() != rows {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, split layer expects {rows}",
            x.ncols()
        )));
    }
    Ok(x.dot(&s.effective_weight()))
}
