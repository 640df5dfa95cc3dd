//! Fitted-detector file format.
//!
//! Layout: magic "SNDT", version u16, variant tag u8 (0 md, 1 pca, 2 ae,
//! 3 vae, 4 gram), tensor count u32 and named tensors (name length u16,
//! UTF-8 name, rows u32, cols u32, row-major f32 data), then threshold f64
//! and calibration quantile f64. Everything little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SentinelError};
use crate::linalg::Matrix;

use super::{
    AeParams, DetectorKind, DetectorParams, FittedDetector, GramParams, MahalanobisParams,
    PcaParams, VaeParams,
};

pub const DETECTOR_MAGIC: &[u8; 4] = b"SNDT";
pub const DETECTOR_VERSION: u16 = 1;

fn variant_tag(kind: DetectorKind) -> u8 {
    match kind {
        DetectorKind::Mahalanobis => 0,
        DetectorKind::Pca => 1,
        DetectorKind::Ae => 2,
        DetectorKind::Vae => 3,
        DetectorKind::Gram => 4,
    }
}

fn scalar(v: f64) -> Matrix {
    Matrix::from_vec(1, 1, vec![v]).expect("finite scalar")
}

fn row(v: &[f64]) -> Matrix {
    Matrix::row_vector(v).expect("finite row")
}

fn tensor_list(params: &DetectorParams) -> Vec<(&'static str, Matrix)> {
    match params {
        DetectorParams::Mahalanobis(p) => vec![
            ("mean", p.mean.clone()),
            ("precision", p.precision.clone()),
            ("epsilon", scalar(p.epsilon)),
        ],
        DetectorParams::Pca(p) => vec![
            ("mean", p.mean.clone()),
            ("components", p.components.clone()),
        ],
        DetectorParams::Ae(p) => vec![
            ("w1", p.w1.clone()),
            ("b1", p.b1.clone()),
            ("w2", p.w2.clone()),
            ("b2", p.b2.clone()),
            ("w3", p.w3.clone()),
            ("b3", p.b3.clone()),
            ("w4", p.w4.clone()),
            ("b4", p.b4.clone()),
        ],
        DetectorParams::Vae(p) => vec![
            ("w_enc", p.w_enc.clone()),
            ("b_enc", p.b_enc.clone()),
            ("w_mu", p.w_mu.clone()),
            ("b_mu", p.b_mu.clone()),
            ("w_logvar", p.w_logvar.clone()),
            ("b_logvar", p.b_logvar.clone()),
            ("w_dec1", p.w_dec1.clone()),
            ("b_dec1", p.b_dec1.clone()),
            ("w_dec2", p.w_dec2.clone()),
            ("b_dec2", p.b_dec2.clone()),
            ("beta", scalar(p.beta)),
        ],
        DetectorParams::Gram(p) => vec![
            ("mins", row(&p.mins)),
            ("maxs", row(&p.maxs)),
            (
                "shape",
                row(&[p.payload_rows as f64, p.payload_cols as f64]),
            ),
        ],
    }
}

pub fn write_detector(path: &Path, det: &FittedDetector) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DETECTOR_MAGIC)?;
    w.write_all(&DETECTOR_VERSION.to_le_bytes())?;
    w.write_all(&[variant_tag(det.kind())])?;
    let tensors = tensor_list(&det.params);
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for &v in m.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.write_all(&det.threshold.to_le_bytes())?;
    w.write_all(&det.quantile.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_detector(path: &Path) -> Result<FittedDetector> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &display)?;
    if &magic != DETECTOR_MAGIC {
        return Err(SentinelError::BadMagic {
            path: display,
            expected: "SNDT",
        });
    }
    let version = read_u16(&mut r, &display)?;
    if version != DETECTOR_VERSION {
        return Err(SentinelError::VersionMismatch {
            path: display,
            found: version,
            expected: DETECTOR_VERSION,
        });
    }
    let mut tag = [0u8; 1];
    read_exact(&mut r, &mut tag, &display)?;

    let count = read_u32(&mut r, &display)?;
    let mut tensors: BTreeMap<String, Matrix> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r, &display)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, &display)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| SentinelError::InvalidArgument(format!("{display}: bad tensor name")))?;
        let rows = read_u32(&mut r, &display)? as usize;
        let cols = read_u32(&mut r, &display)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, &display)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    let mut f = [0u8; 8];
    read_exact(&mut r, &mut f, &display)?;
    let threshold = f64::from_le_bytes(f);
    read_exact(&mut r, &mut f, &display)?;
    let quantile = f64::from_le_bytes(f);

    let mut take = |name: &str| -> Result<Matrix> {
        tensors.remove(name).ok_or_else(|| {
            SentinelError::InvalidArgument(format!("{display}: missing tensor `{name}`"))
        })
    };
    let params = match tag[0] {
        0 => {
            let mean = take("mean")?;
            let precision = take("precision")?;
            let epsilon = take("epsilon")?.get(0, 0);
            DetectorParams::Mahalanobis(MahalanobisParams {
                mean,
                precision,
                epsilon,
            })
        }
        1 => {
            let mean = take("mean")?;
            let components = take("components")?;
            let k = components.cols();
            DetectorParams::Pca(PcaParams {
                mean,
                components,
                k,
            })
        }
        2 => DetectorParams::Ae(AeParams {
            w1: take("w1")?,
            b1: take("b1")?,
            w2: take("w2")?,
            b2: take("b2")?,
            w3: take("w3")?,
            b3: take("b3")?,
            w4: take("w4")?,
            b4: take("b4")?,
        }),
        3 => {
            let beta = take("beta")?.get(0, 0);
            DetectorParams::Vae(VaeParams {
                w_enc: take("w_enc")?,
                b_enc: take("b_enc")?,
                w_mu: take("w_mu")?,
                b_mu: take("b_mu")?,
                w_logvar: take("w_logvar")?,
                b_logvar: take("b_logvar")?,
                w_dec1: take("w_dec1")?,
                b_dec1: take("b_dec1")?,
                w_dec2: take("w_dec2")?,
                b_dec2: take("b_dec2")?,
                beta,
            })
        }
        4 => {
            let mins = take("mins")?;
            let maxs = take("maxs")?;
            let shape = take("shape")?;
            DetectorParams::Gram(GramParams {
                payload_rows: shape.get(0, 0) as usize,
                payload_cols: shape.get(0, 1) as usize,
                mins: mins.row(0).to_vec(),
                maxs: maxs.row(0).to_vec(),
            })
        }
        other => {
            return Err(SentinelError::InvalidArgument(format!(
                "{display}: unknown detector variant tag {other}"
            )))
        }
    };
    Ok(FittedDetector {
        params,
        threshold,
        quantile,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            SentinelError::Truncated {
                path: path.to_string(),
            }
        } else {
            SentinelError::Io(e)
        }
    })
}

fn read_u16(r: &mut impl Read, path: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, path)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}
