//! PCA residual scoring: distance from the benign principal subspace.

use crate::error::{Result, SentinelError};
use crate::linalg::{eigh_sym, Matrix};

use super::mahalanobis::{column_mean, sample_covariance};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaParams {
    /// Sample mean, `1 x d`.
    pub mean: Matrix,
    /// Orthonormal principal directions as columns, `d x k`.
    pub components: Matrix,
    pub k: usize,
}

/// Fit the smallest principal subspace whose cumulative explained variance
/// reaches `variance_target`.
pub fn fit_pca(benign: &Matrix, variance_target: f64) -> Result<PcaParams> {
    if !(0.0 < variance_target && variance_target <= 1.0) {
        return Err(SentinelError::InvalidArgument(format!(
            "variance_target must lie in (0, 1], got {variance_target}"
        )));
    }
    if benign.rows() < 2 {
        return Err(SentinelError::InvalidArgument(format!(
            "pca fit needs >= 2 samples, got {}",
            benign.rows()
        )));
    }
    let mean = column_mean(benign);
    let cov = sample_covariance(benign, &mean)?;
    let (eigenvalues, vectors) = eigh_sym(&cov)?;
    let clipped: Vec<f64> = eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return Err(SentinelError::InvalidArgument(
            "pca fit: data has rank 0 (zero covariance)".into(),
        ));
    }
    let slack = 1e-12 * total;
    let mut cum = 0.0;
    let mut k = clipped.len();
    for (i, l) in clipped.iter().enumerate() {
        cum += l;
        if cum + slack >= variance_target * total {
            k = i + 1;
            break;
        }
    }
    let d = benign.cols();
    let components = Matrix::from_fn(d, k, |i, j| vectors.get(i, j))?;
    Ok(PcaParams {
        mean,
        components,
        k,
    })
}

/// Squared norm of the component of `x - mean` orthogonal to the principal
/// subspace: `||(x - mu) - V V^T (x - mu)||^2`.
pub fn score_pca(params: &PcaParams, x: &[f64]) -> Result<f64> {
    let d = params.mean.cols();
    if x.len() != d {
        return Err(SentinelError::ShapeMismatch(format!(
            "pca score: feature width {} != {d}",
            x.len()
        )));
    }
    let centered: Vec<f64> = x
        .iter()
        .zip(params.mean.row(0))
        .map(|(a, m)| a - m)
        .collect();
    // coords = V^T r; residual = r - V coords.
    let k = params.k;
    let mut coords = vec![0.0; k];
    for (j, c) in coords.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..d {
            acc += params.components.get(i, j) * centered[i];
        }
        *c = acc;
    }
    let mut score = 0.0;
    for i in 0..d {
        let mut proj = 0.0;
        for (j, c) in coords.iter().enumerate() {
            proj += params.components.get(i, j) * c;
        }
        let r = centered[i] - proj;
        score += r * r;
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    #[test]
    fn components_orthonormal() {
        let mut rng = SplitRng::seeded(3);
        let data = Matrix::from_fn(50, 5, |_, _| rng.standard_normal()).unwrap();
        let p = fit_pca(&data, 0.9).unwrap();
        let vtv = p.components.transpose().matmul(&p.components).unwrap();
        assert!(vtv.max_abs_diff(&Matrix::identity(p.k)) < 1e-8);
    }

    #[test]
    fn point_in_span_scores_zero_at_full_variance() {
        let mut rng = SplitRng::seeded(4);
        let data = Matrix::from_fn(30, 4, |_, _| rng.standard_normal()).unwrap();
        let p = fit_pca(&data, 1.0).unwrap();
        for i in 0..data.rows() {
            let s = score_pca(&p, data.row(i)).unwrap();
            assert!(s < 1e-16 * 100.0, "score {s}");
        }
    }

    #[test]
    fn orthogonal_offset_scores_its_squared_norm() {
        // 1-D data embedded in 3-D along e0; offset along e2 scores ||delta||^2.
        let mut rows = Vec::new();
        let mut rng = SplitRng::seeded(5);
        for _ in 0..40 {
            rows.extend_from_slice(&[rng.standard_normal(), 0.0, 0.0]);
        }
        let data = Matrix::from_vec(40, 3, rows).unwrap();
        let p = fit_pca(&data, 0.99).unwrap();
        assert_eq!(p.k, 1);
        let mean0 = p.mean.get(0, 0);
        let delta = 0.7;
        let s = score_pca(&p, &[mean0 + 1.3, 0.0, delta]).unwrap();
        assert!((s - delta * delta).abs() < 1e-10, "score {s}");
    }

    #[test]
    fn matches_full_eigendecomposition_oracle() {
        let mut rng = SplitRng::seeded(6);
        for _ in 0..10 {
            let n = 20 + rng.gen_range(0, 20);
            let d = 3 + rng.gen_range(0, 4);
            let data = Matrix::from_fn(n, d, |_, _| rng.standard_normal()).unwrap();
            let target = 0.5 + 0.5 * rng.uniform();
            let p = fit_pca(&data, target).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let got = score_pca(&p, &x).unwrap();

            // Oracle: build the projector P = V V^T explicitly from the full
            // eigendecomposition and compute ||(I - P) r||^2 by loops.
            let mean = column_mean(&data);
            let cov = sample_covariance(&data, &mean).unwrap();
            let (_, vectors) = eigh_sym(&cov).unwrap();
            let r: Vec<f64> = x.iter().zip(mean.row(0)).map(|(a, m)| a - m).collect();
            let mut resid = r.clone();
            for j in 0..p.k {
                let mut coord = 0.0;
                for i in 0..d {
                    coord += vectors.get(i, j) * r[i];
                }
                for i in 0..d {
                    resid[i] -= vectors.get(i, j) * coord;
                }
            }
            let oracle: f64 = resid.iter().map(|v| v * v).sum();
            assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
        }
    }

    #[test]
    fn rank_zero_rejected() {
        let data = Matrix::from_vec(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(fit_pca(&data, 0.9).is_err());
    }

    #[test]
    fn bad_variance_target_rejected() {
        let data = Matrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(fit_pca(&data, 0.0).is_err());
        assert!(fit_pca(&data, 1.5).is_err());
    }
}
