//! Memory-bound element-wise operators and their fused forms.
//!
//! Each fused kernel performs the same scalar operations in the same order as
//! its multi-pass counterpart, so the two agree bit for bit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f32 = 1e-12;

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_COEFF: f32 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayernormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub epsilon: f32,
}

impl LayernormParams {
    /// γ = 1, β = 0.
    pub fn identity(dim: usize) -> Self {
        LayernormParams {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            epsilon: LAYERNORM_EPS,
        }
    }

    fn validate(&self, cols: usize) -> Result<()> {
        if self.gamma.len() != cols || self.beta.len() != cols {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "gamma/beta have {}/{} entries for {cols} columns",
                    self.gamma.len(),
                    self.beta.len()
                ),
            ));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::shape("layernorm", "epsilon must be positive"));
        }
        Ok(())
    }
}

/// Mean and population variance in a single Welford sweep.
#[inline]
fn moments(row: &[f32]) -> (f32, f32) {
    let mut mean = 0.0f32;
    let mut m2 = 0.0f32;
    for (i, &x) in row.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f32;
        m2 += delta * (x - mean);
    }
    (mean, m2 / row.len() as f32)
}

#[inline]
fn normalize_row(row: &mut [f32], params: &LayernormParams) {
    let (mean, var) = moments(row);
    let inv = 1.0 / (var + params.epsilon).sqrt();
    for ((v, g), b) in row.iter_mut().zip(&params.gamma).zip(&params.beta) {
        *v = g * ((*v - mean) * inv) + b;
    }
}

/// `layernorm(x + residual + bias)` in one pass over each row.
pub fn add_bias_residual_layernorm(
    x: &Tensor,
    residual: &Tensor,
    bias: &[f32],
    params: &LayernormParams,
) -> Result<Tensor> {
    if (x.rows(), x.cols()) != (residual.rows(), residual.cols()) {
        return Err(Error::shape(
            "add_bias_residual_layernorm",
            format!(
                "input is {}x{}, residual is {}x{}",
                x.rows(),
                x.cols(),
                residual.rows(),
                residual.cols()
            ),
        ));
    }
    check_bias("add_bias_residual_layernorm", bias, x.cols())?;
    params.validate(x.cols())?;
    let cols = x.cols();
    let mut out = Tensor::zeros(x.rows(), cols);
    if cols == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(r, dst)| {
            for (((d, &a), &res), &b) in dst.iter_mut().zip(x.row(r)).zip(residual.row(r)).zip(bias) {
                *d = (a + res) + b;
            }
            normalize_row(dst, params);
        });
    Ok(out)
}

/// Element-wise `x + y`.
pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if (x.rows(), x.cols()) != (y.rows(), y.cols()) {
        return Err(Error::shape("add", "operands differ in shape"));
    }
    let mut out = x.clone();
    for (v, &w) in out.data_mut().iter_mut().zip(y.data()) {
        *v += w;
    }
    Ok(out)
}

/// Adds `bias[col]` to every row.
pub fn add_bias(x: &Tensor, bias: &[f32]) -> Result<Tensor> {
    check_bias("add_bias", bias, x.cols())?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(out)
}

/// Standalone layernorm pass.
pub fn layernorm(x: &Tensor, params: &LayernormParams) -> Result<Tensor> {
    params.validate(x.cols())?;
    let mut out = x.clone();
    let cols = x.cols();
    if cols == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(cols)
        .for_each(|row| normalize_row(row, params));
    Ok(out)
}

/// Three-pass reference for [`add_bias_residual_layernorm`].
pub fn add_bias_residual_layernorm_unfused(
    x: &Tensor,
    residual: &Tensor,
    bias: &[f32],
    params: &LayernormParams,
) -> Result<Tensor> {
    let summed = add(x, residual)?;
    let biased = add_bias(&summed, bias)?;
    layernorm(&biased, params)
}

/// Standalone GELU pass.
pub fn gelu_tensor(x: &Tensor) -> Tensor {
    x.map(gelu)
}

/// `gelu(v + bias[col])` over a GEMM output tile, in place.
pub fn bias_gelu_epilogue(tile: &mut Tensor, bias: &[f32]) -> Result<()> {
    check_bias("bias_gelu_epilogue", bias, tile.cols())?;
    for r in 0..tile.rows() {
        for (v, b) in tile.row_mut(r).iter_mut().zip(bias) {
            *v = gelu(*v + b);
        }
    }
    Ok(())
}

fn check_bias(op: &'static str, bias: &[f32], cols: usize) -> Result<()> {
    if bias.len() != cols {
        return Err(Error::shape(
            op,
            format!("bias has {} entries for {cols} columns", bias.len()),
        ));
    }
    Ok(())
}
