//! Gram-statistics bounds detector.
//!
//! For orders p in {1, 2}, the Gram feature of a trace payload is the upper
//! triangle (diagonal included) of `(M^p)(M^p)^T` for an attention matrix
//! `M`, or of the outer product `(v^p)^T (v^p)` for an activation row `v`,
//! where `^p` is element-wise. Fitting records coordinate-wise min/max
//! bounds over benign samples; the score is the mean out-of-bounds
//! deviation per coordinate.

use crate::error::{Result, SentinelError};
use crate::linalg::Matrix;

pub const GRAM_ORDERS: [u32; 2] = [1, 2];

#[derive(Debug, Clone, PartialEq)]
pub struct GramParams {
    /// Shape of the payload this detector was fitted on.
    pub payload_rows: usize,
    pub payload_cols: usize,
    /// Coordinate-wise bounds over benign Gram features.
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

fn upper_triangle(g: &Matrix) -> Vec<f64> {
    let n = g.rows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(g.get(i, j));
        }
    }
    out
}

fn elementwise_pow(m: &Matrix, p: u32) -> Matrix {
    let mut out = m.clone();
    if p > 1 {
        for v in out.data_mut() {
            *v = v.powi(p as i32);
        }
    }
    out
}

/// Concatenated per-order Gram features of one payload.
pub fn gram_features(payload: &Matrix) -> Result<Vec<f64>> {
    let mut features = Vec::new();
    for &p in &GRAM_ORDERS {
        let powered = elementwise_pow(payload, p);
        let gram = if payload.rows() == 1 {
            // Activation row: outer product v^T v.
            powered.transpose().matmul(&powered)?
        } else {
            powered.matmul(&powered.transpose())?
        };
        features.extend(upper_triangle(&gram));
    }
    Ok(features)
}

/// Record coordinate-wise min/max Gram bounds over benign payloads.
pub fn fit_gram(benign: &[&Matrix]) -> Result<GramParams> {
    if benign.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "gram fit: empty benign set".into(),
        ));
    }
    let shape = benign[0].shape();
    let mut mins: Option<Vec<f64>> = None;
    let mut maxs: Option<Vec<f64>> = None;
    for payload in benign {
        if payload.shape() != shape {
            return Err(SentinelError::ShapeMismatch(format!(
                "gram fit: payload {:?} != {:?}",
                payload.shape(),
                shape
            )));
        }
        let f = gram_features(payload)?;
        match (&mut mins, &mut maxs) {
            (Some(mn), Some(mx)) => {
                for (i, v) in f.iter().enumerate() {
                    if *v < mn[i] {
                        mn[i] = *v;
                    }
                    if *v > mx[i] {
                        mx[i] = *v;
                    }
                }
            }
            _ => {
                mins = Some(f.clone());
                maxs = Some(f);
            }
        }
    }
    Ok(GramParams {
        payload_rows: shape.0,
        payload_cols: shape.1,
        mins: mins.expect("nonempty"),
        maxs: maxs.expect("nonempty"),
    })
}

/// Mean per-coordinate deviation outside the benign bounds.
pub fn score_gram(params: &GramParams, payload: &Matrix) -> Result<f64> {
    if payload.shape() != (params.payload_rows, params.payload_cols) {
        return Err(SentinelError::ShapeMismatch(format!(
            "gram score: payload {:?} != {:?}",
            payload.shape(),
            (params.payload_rows, params.payload_cols)
        )));
    }
    let f = gram_features(payload)?;
    let mut total = 0.0;
    for (i, v) in f.iter().enumerate() {
        total += (params.mins[i] - v).max(0.0) + (v - params.maxs[i]).max(0.0);
    }
    Ok(total / f.len() as f64)
}
