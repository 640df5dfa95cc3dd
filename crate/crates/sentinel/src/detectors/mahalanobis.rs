//! Mahalanobis-distance scoring against the benign feature distribution.

use crate::error::{Result, SentinelError};
use crate::linalg::{eigh_sym, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisParams {
    /// Sample mean, `1 x d`.
    pub mean: Matrix,
    /// Inverse of the regularized sample covariance, `d x d`, symmetric
    /// positive definite.
    pub precision: Matrix,
    pub epsilon: f64,
}

/// Column means of a data matrix.
pub(crate) fn column_mean(data: &Matrix) -> Matrix {
    let n = data.rows() as f64;
    let mut mean = Matrix::zeros(1, data.cols());
    for i in 0..data.rows() {
        for (m, v) in mean.row_mut(0).iter_mut().zip(data.row(i)) {
            *m += v;
        }
    }
    mean.row_mut(0).iter_mut().for_each(|m| *m /= n);
    mean
}

/// Sample covariance (divisor n - 1) of rows around their mean.
pub(crate) fn sample_covariance(data: &Matrix, mean: &Matrix) -> Result<Matrix> {
    let n = data.rows();
    let mut centered = data.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(mean.row(0)) {
            *v -= m;
        }
    }
    let cov = centered
        .transpose()
        .matmul(&centered)?
        .scale(1.0 / (n as f64 - 1.0));
    Ok(cov)
}

/// Scale-relative regularization: `1e-6 * trace(cov) / d`, floored so the
/// precision stays representable after the f32 file boundary.
pub fn default_epsilon(cov: &Matrix) -> f64 {
    let d = cov.rows();
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    (1e-6 * trace / d as f64).max(1e-12)
}

/// Fit mean and precision on benign feature rows. The covariance is
/// regularized by `epsilon * I` before inversion through the symmetric
/// eigendecomposition.
pub fn fit_mahalanobis(benign: &Matrix, epsilon: f64) -> Result<MahalanobisParams> {
    if benign.rows() < 2 {
        return Err(SentinelError::InvalidArgument(format!(
            "mahalanobis fit needs >= 2 samples, got {}",
            benign.rows()
        )));
    }
    if epsilon <= 0.0 {
        return Err(SentinelError::InvalidArgument(
            "mahalanobis epsilon must be > 0".into(),
        ));
    }
    let d = benign.cols();
    let mean = column_mean(benign);
    let mut cov = sample_covariance(benign, &mean)?;
    for i in 0..d {
        cov.set(i, i, cov.get(i, i) + epsilon);
    }
    let (eigenvalues, vectors) = eigh_sym(&cov)?;
    if eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(SentinelError::InvalidArgument(
            "regularized covariance is not positive definite".into(),
        ));
    }
    // precision = V diag(1/lambda) V^T, symmetrized against rounding.
    let mut precision = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += vectors.get(i, k) * vectors.get(j, k) / eigenvalues[k];
            }
            precision.set(i, j, acc);
            precision.set(j, i, acc);
        }
    }
    Ok(MahalanobisParams {
        mean,
        precision,
        epsilon,
    })
}

/// Fit with the scale-relative default regularization.
pub fn fit_mahalanobis_default(benign: &Matrix) -> Result<MahalanobisParams> {
    if benign.rows() < 2 {
        return Err(SentinelError::InvalidArgument(format!(
            "mahalanobis fit needs >= 2 samples, got {}",
            benign.rows()
        )));
    }
    let mean = column_mean(benign);
    let cov = sample_covariance(benign, &mean)?;
    fit_mahalanobis(benign, default_epsilon(&cov))
}

/// Squared Mahalanobis distance `(x - mu)^T precision (x - mu)`.
pub fn score_mahalanobis(params: &MahalanobisParams, x: &[f64]) -> Result<f64> {
    let d = params.mean.cols();
    if x.len() != d {
        return Err(SentinelError::ShapeMismatch(format!(
            "mahalanobis score: feature width {} != {d}",
            x.len()
        )));
    }
    let diff: Vec<f64> = x
        .iter()
        .zip(params.mean.row(0))
        .map(|(a, m)| a - m)
        .collect();
    let mut score = 0.0;
    for i in 0..d {
        let mut row_acc = 0.0;
        for j in 0..d {
            row_acc += params.precision.get(i, j) * diff[j];
        }
        score += diff[i] * row_acc;
    }
    Ok(score.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    #[test]
    fn mean_of_square_cloud() {
        let data = Matrix::from_vec(4, 2, vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
        let p = fit_mahalanobis(&data, 1e-9).unwrap();
        assert!((p.mean.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((p.mean.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_give_epsilon_dominated_precision() {
        let data = Matrix::from_vec(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let eps = 1e-3;
        let p = fit_mahalanobis(&data, eps).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expected = if i == j { 1.0 / eps } else { 0.0 };
                assert!(
                    (p.precision.get(i, j) - expected).abs() < 1e-6 / eps,
                    "precision {:?}",
                    p.precision
                );
            }
        }
    }

    #[test]
    fn correlated_cloud_matches_closed_form_inverse() {
        // 2-D data with known covariance; compare against the 2x2 closed-form
        // inverse of the regularized covariance.
        let mut rng = SplitRng::seeded(12);
        let mut rows = Vec::new();
        for _ in 0..500 {
            let a = rng.standard_normal();
            let b = 0.5 * a + 0.3 * rng.standard_normal();
            rows.push(a);
            rows.push(b);
        }
        let data = Matrix::from_vec(500, 2, rows).unwrap();
        let eps = 1e-4;
        let p = fit_mahalanobis(&data, eps).unwrap();

        let mean = column_mean(&data);
        let cov = sample_covariance(&data, &mean).unwrap();
        let (a, b, c, d) = (
            cov.get(0, 0) + eps,
            cov.get(0, 1),
            cov.get(1, 0),
            cov.get(1, 1) + eps,
        );
        let det = a * d - b * c;
        let inv = [d / det, -b / det, -c / det, a / det];
        for (k, expected) in inv.iter().enumerate() {
            let got = p.precision.data()[k];
            assert!(
                (got - expected).abs() < 1e-8,
                "entry {k}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn score_zero_at_mean_and_euclidean_under_identity() {
        let data = Matrix::from_vec(4, 2, vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
        let p = fit_mahalanobis(&data, 1e-9).unwrap();
        assert!(score_mahalanobis(&p, &[1.0, 1.0]).unwrap() < 1e-9);

        let ident = MahalanobisParams {
            mean: Matrix::zeros(1, 3),
            precision: Matrix::identity(3),
            epsilon: 0.0,
        };
        let s = score_mahalanobis(&ident, &[1.0, 2.0, 2.0]).unwrap();
        assert!((s - 9.0).abs() < 1e-12);
    }

    #[test]
    fn score_matches_quadratic_form_loop_oracle() {
        let mut rng = SplitRng::seeded(8);
        for _ in 0..20 {
            let n = 10 + rng.gen_range(0, 30);
            let d = 2 + rng.gen_range(0, 5);
            let data = Matrix::from_fn(n, d, |_, _| rng.standard_normal()).unwrap();
            let p = fit_mahalanobis_default(&data).unwrap();
            let x: Vec<f64> = (0..d).map(|_| 2.0 * rng.standard_normal()).collect();
            let got = score_mahalanobis(&p, &x).unwrap();

            let diff: Vec<f64> = x.iter().zip(p.mean.row(0)).map(|(a, m)| a - m).collect();
            let mut oracle = 0.0;
            for i in 0..d {
                for j in 0..d {
                    oracle += diff[i] * p.precision.get(i, j) * diff[j];
                }
            }
            assert!((got - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let data = Matrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = fit_mahalanobis(&data, 1e-6).unwrap();
        assert!(score_mahalanobis(&p, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn rotation_invariance() {
        // Rotating fitting data and query by the same orthogonal matrix
        // leaves the score unchanged.
        let mut rng = SplitRng::seeded(77);
        let data = Matrix::from_fn(60, 3, |_, _| rng.standard_normal()).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();

        // Orthogonal matrix from the eigenvectors of a random symmetric matrix.
        let raw = Matrix::from_fn(3, 3, |_, _| rng.standard_normal()).unwrap();
        let sym = raw.add(&raw.transpose()).unwrap().scale(0.5);
        let (_, q) = eigh_sym(&sym).unwrap();

        let rotated = data.matmul(&q).unwrap();
        let xr_m = Matrix::row_vector(&x).unwrap().matmul(&q).unwrap();

        let eps = 1e-8;
        let p1 = fit_mahalanobis(&data, eps).unwrap();
        let p2 = fit_mahalanobis(&rotated, eps).unwrap();
        let s1 = score_mahalanobis(&p1, &x).unwrap();
        let s2 = score_mahalanobis(&p2, xr_m.row(0)).unwrap();
        assert!((s1 - s2).abs() < 1e-6 * s1.max(1.0), "{s1} vs {s2}");
    }
}
