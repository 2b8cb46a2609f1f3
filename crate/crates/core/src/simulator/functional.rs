//! Functional execution on the modelled hardware: the quantization unit's
//! bit-level clip and the DPU's bit-serial PEs and compressor trees.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::HwConfig;
use crate::bitengine::{dpu_dot, DataConfig, PE_WIDTHS};
use crate::error::{Error, Result};
use crate::f16::F16;
use crate::quantize::{clip_unit, elastic_prescale, ElasticParams};
use crate::refmodel::{encoder_forward_with, Datapath, EncoderWeights, ModelConfig};
use crate::tensor::{QTensor, SignMatrix, Signedness};

/// Datapath that routes every integer operation through the bit-level
/// models. Counts DPU cycles as a sum over all dot products.
#[derive(Debug)]
pub struct BitSerialDatapath {
    p_pe: usize,
    dpu_cycles: AtomicU64,
}

impl BitSerialDatapath {
    pub fn new(hw: &HwConfig) -> Self {
        BitSerialDatapath {
            p_pe: hw.p_pe,
            dpu_cycles: AtomicU64::new(0),
        }
    }

    pub fn dpu_cycles(&self) -> u64 {
        self.dpu_cycles.load(Ordering::Relaxed)
    }

    fn check_width(bits: u32) -> Result<()> {
        if PE_WIDTHS.contains(&bits) {
            Ok(())
        } else {
            Err(Error::UnsupportedWidth(bits))
        }
    }

    fn dots(
        &self,
        x: ArrayView2<i64>,
        n_x: u32,
        x_sign: Signedness,
        y: ArrayView2<i64>,
        y_config: DataConfig,
    ) -> Result<Array2<i64>> {
        let (m, n) = (x.nrows(), y.nrows());
        let rows: Vec<Result<(Vec<i64>, u64)>> = (0..m)
            .into_par_iter()
            .map(|i| {
                let xi = x.row(i).to_vec();
                let mut out = Vec::with_capacity(n);
                let mut cycles = 0u64;
                for j in 0..n {
                    let yj = y.row(j).to_vec();
                    let (v, c) = dpu_dot(&xi, n_x, x_sign, &yj, y_config, self.p_pe)?;
                    out.push(v);
                    cycles += c;
                }
                Ok((out, cycles))
            })
            .collect();
        let mut acc = Array2::zeros((m, n));
        for (i, r) in rows.into_iter().enumerate() {
            let (vals, cycles) = r?;
            acc.row_mut(i).assign(&ndarray::Array1::from(vals));
            self.dpu_cycles.fetch_add(cycles, Ordering::Relaxed);
        }
        Ok(acc)
    }
}

impl Datapath for BitSerialDatapath {
    fn quantize(&self, x: &Array2<F16>, p: &ElasticParams) -> Result<QTensor> {
        Self::check_width(p.bit_width)?;
        let codes = x.mapv(|v| clip_unit(elastic_prescale(v, p), p.bit_width, p.signedness));
        QTensor::new(codes, p.bit_width, p.signedness, p.scale, p.bias)
    }

    fn matmul_binary(&self, a: &QTensor, w: &SignMatrix) -> Result<Array2<i64>> {
        if a.shape().1 != w.rows() {
            return Err(Error::ShapeMismatch(format!(
                "activation width {} vs weight rows {}",
                a.shape().1,
                w.rows()
            )));
        }
        Self::check_width(a.bit_width())?;
        let x = a.codes().mapv(|c| c as i64);
        // Weight columns become serial operands of one bit each.
        let y = Array2::from_shape_fn((w.cols(), w.rows()), |(j, k)| w.bit(k, j) as i64);
        self.dots(x.view(), a.bit_width(), a.signedness(), y.view(), DataConfig::BinaryWeight)
    }

    fn matmul_act(
        &self,
        x: ArrayView2<i32>,
        x_fmt: (u32, Signedness),
        y: ArrayView2<i32>,
        y_fmt: (u32, Signedness),
    ) -> Result<Array2<i64>> {
        if x.len_of(Axis(1)) != y.len_of(Axis(1)) {
            return Err(Error::ShapeMismatch(format!(
                "inner dimensions {} and {}",
                x.ncols(),
                y.ncols()
            )));
        }
        Self::check_width(x_fmt.0)?;
        Self::check_width(y_fmt.0)?;
        let x = x.mapv(|c| c as i64);
        let y = y.mapv(|c| c as i64);
        self.dots(
            x.view(),
            x_fmt.0,
            x_fmt.1,
            y.view(),
            DataConfig::activation(y_fmt.0, y_fmt.1),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalRun {
    pub output: Array2<F16>,
    /// Sum of DPU cycles over every dot product, before any parallelism.
    pub dpu_cycles: u64,
}

/// Run one sample through the encoder on the bit-level datapath.
pub fn simulate(cfg: &ModelConfig, weights: &EncoderWeights, hw: &HwConfig, input: &Array2<F16>) -> Result<FunctionalRun> {
    hw.validate()?;
    let dp = BitSerialDatapath::new(hw);
    let output = encoder_forward_with(&dp, input, weights, cfg)?;
    Ok(FunctionalRun {
        output,
        dpu_cycles: dp.dpu_cycles(),
    })
}
