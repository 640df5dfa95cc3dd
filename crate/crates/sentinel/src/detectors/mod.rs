//! Unsupervised anomaly detectors fitted on benign traces only.
//!
//! Five scorers: Mahalanobis distance, PCA reconstruction residual,
//! autoencoder reconstruction error, variational autoencoder ELBO-style
//! error, and Gram-statistics bounds. Each produces a scalar anomaly score;
//! a threshold calibrated as a benign-score quantile turns scores into
//! flags. No backdoor sample ever enters fitting or calibration.

mod autoencoder;
mod gram;
mod mahalanobis;
mod pca;
mod store;

pub use autoencoder::{
    ae_reconstruct, fit_autoencoder, fit_vae, score_ae, score_vae, AeHyper, AeParams, VaeParams,
};
pub use gram::{fit_gram, gram_features, score_gram, GramParams};
pub use mahalanobis::{
    default_epsilon, fit_mahalanobis, fit_mahalanobis_default, score_mahalanobis, MahalanobisParams,
};
pub use pca::{fit_pca, score_pca, PcaParams};
pub use store::{read_detector, write_detector, DETECTOR_MAGIC, DETECTOR_VERSION};

use crate::error::{Result, SentinelError};
use crate::linalg::Matrix;
use crate::traces::TraceRecord;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum DetectorKind {
    Mahalanobis,
    Pca,
    Ae,
    Vae,
    Gram,
}

/// Report and CLI order of the suite.
pub const ALL_DETECTORS: [DetectorKind; 5] = [
    DetectorKind::Mahalanobis,
    DetectorKind::Pca,
    DetectorKind::Ae,
    DetectorKind::Vae,
    DetectorKind::Gram,
];

impl DetectorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DetectorKind::Mahalanobis => "md",
            DetectorKind::Pca => "pca",
            DetectorKind::Ae => "ae",
            DetectorKind::Vae => "vae",
            DetectorKind::Gram => "gram",
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = SentinelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" => Ok(DetectorKind::Mahalanobis),
            "pca" => Ok(DetectorKind::Pca),
            "ae" => Ok(DetectorKind::Ae),
            "vae" => Ok(DetectorKind::Vae),
            "gram" => Ok(DetectorKind::Gram),
            other => Err(SentinelError::InvalidArgument(format!(
                "unknown detector `{other}` (expected md|pca|ae|vae|gram)"
            ))),
        }
    }
}

/// Fitted parameters of one detector variant.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectorParams {
    Mahalanobis(MahalanobisParams),
    Pca(PcaParams),
    Ae(AeParams),
    Vae(VaeParams),
    Gram(GramParams),
}

impl DetectorParams {
    pub fn kind(&self) -> DetectorKind {
        match self {
            DetectorParams::Mahalanobis(_) => DetectorKind::Mahalanobis,
            DetectorParams::Pca(_) => DetectorKind::Pca,
            DetectorParams::Ae(_) => DetectorKind::Ae,
            DetectorParams::Vae(_) => DetectorKind::Vae,
            DetectorParams::Gram(_) => DetectorKind::Gram,
        }
    }

    /// Anomaly score of one trace payload (attention matrix or activation row).
    pub fn score(&self, payload: &Matrix) -> Result<f64> {
        match self {
            DetectorParams::Mahalanobis(p) => score_mahalanobis(p, payload.data()),
            DetectorParams::Pca(p) => score_pca(p, payload.data()),
            DetectorParams::Ae(p) => score_ae(p, payload.data()),
            DetectorParams::Vae(p) => score_vae(p, payload.data()),
            DetectorParams::Gram(p) => score_gram(p, payload),
        }
    }
}

/// A detector plus its calibrated decision threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedDetector {
    pub params: DetectorParams,
    /// Empirical `quantile`-quantile of benign calibration scores.
    pub threshold: f64,
    pub quantile: f64,
}

impl FittedDetector {
    pub fn kind(&self) -> DetectorKind {
        self.params.kind()
    }

    pub fn score(&self, payload: &Matrix) -> Result<f64> {
        self.params.score(payload)
    }

    /// A sample is flagged when its score exceeds the threshold.
    pub fn flag(&self, payload: &Matrix) -> Result<bool> {
        Ok(self.score(payload)? > self.threshold)
    }
}

/// Interpolated empirical quantile (index `q * (n - 1)` into the sorted
/// scores, linear between neighbors).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Calibrate a detection threshold as the empirical `q`-quantile of the
/// detector's scores on a benign calibration set disjoint from fitting data.
pub fn calibrate_threshold(
    params: DetectorParams,
    calibration: &[&Matrix],
    q: f64,
) -> Result<FittedDetector> {
    if !(0.0 < q && q < 1.0) {
        return Err(SentinelError::InvalidArgument(format!(
            "calibration quantile must lie in (0, 1), got {q}"
        )));
    }
    if calibration.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "calibration set is empty".into(),
        ));
    }
    let mut scores = Vec::with_capacity(calibration.len());
    for payload in calibration {
        scores.push(params.score(payload)?);
    }
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = quantile(&scores, q);
    Ok(FittedDetector {
        params,
        threshold,
        quantile: q,
    })
}

/// Stack flattened trace payloads into an `n x width` feature matrix.
pub fn stack_features(records: &[&TraceRecord]) -> Result<Matrix> {
    if records.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "stack_features: no records".into(),
        ));
    }
    let width = records[0].payload.data().len();
    let mut data = Vec::with_capacity(records.len() * width);
    for r in records {
        if r.payload.data().len() != width {
            return Err(SentinelError::ShapeMismatch(format!(
                "stack_features: payload width {} != {}",
                r.payload.data().len(),
                width
            )));
        }
        data.extend_from_slice(r.payload.data());
    }
    Matrix::from_vec(records.len(), width, data)
}
