//! Internal-state trace records and their binary file format.
//!
//! A trace is one captured matrix from a forward pass: either a row-wise
//! min-max normalized attention score matrix (LxL) or a residual activation
//! vector (1xd). Payloads cross the file boundary as little-endian f32;
//! everything else in the file is little-endian fixed-width integers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SentinelError};
use crate::linalg::Matrix;

pub const TRACE_MAGIC: &[u8; 4] = b"SNTR";
pub const TRACE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Label {
    Benign,
    Backdoor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Calibration,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TraceKind {
    Attention,
    Activation,
}

impl TraceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceKind::Attention => "attention",
            TraceKind::Activation => "activation",
        }
    }
}

impl std::str::FromStr for TraceKind {
    type Err = SentinelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(TraceKind::Attention),
            "activation" => Ok(TraceKind::Activation),
            other => Err(SentinelError::InvalidArgument(format!(
                "unknown trace kind `{other}` (expected attention|activation)"
            ))),
        }
    }
}

/// One captured internal-state matrix with its provenance tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub label: Label,
    pub split: Split,
    pub kind: TraceKind,
    pub layer: u16,
    pub payload: Matrix,
}

/// A homogeneous collection of trace records plus in-memory provenance.
///
/// `meta` is not persisted: the file format stores records only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceSet {
    pub records: Vec<TraceRecord>,
    pub meta: std::collections::BTreeMap<String, String>,
}

impl TraceSet {
    pub fn new(records: Vec<TraceRecord>) -> Self {
        TraceSet {
            records,
            meta: Default::default(),
        }
    }

    pub fn filter(&self, f: impl Fn(&TraceRecord) -> bool) -> TraceSet {
        TraceSet::new(self.records.iter().filter(|r| f(r)).cloned().collect())
    }
}

/// Row-wise min-max normalization: each row maps to `(r - min r) / (max r - min r)`.
/// Constant rows map to all zeros. Output entries lie in [0, 1].
pub fn rowwise_minmax_normalize(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        if span == 0.0 {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v = (*v - min) / span);
        }
    }
    out
}

/// Row-major flattening of a square normalized attention matrix.
pub fn flatten_attention(a_norm: &Matrix) -> Result<Vec<f64>> {
    if a_norm.rows() != a_norm.cols() {
        return Err(SentinelError::ShapeMismatch(format!(
            "flatten_attention: expected square matrix, got {}x{}",
            a_norm.rows(),
            a_norm.cols()
        )));
    }
    Ok(a_norm.data().to_vec())
}

fn label_code(l: Label) -> u8 {
    match l {
        Label::Benign => 0,
        Label::Backdoor => 1,
    }
}

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Calibration => 1,
        Split::Test => 2,
    }
}

fn kind_code(k: TraceKind) -> u8 {
    match k {
        TraceKind::Attention => 0,
        TraceKind::Activation => 1,
    }
}

fn decode_label(path: &str, b: u8) -> Result<Label> {
    match b {
        0 => Ok(Label::Benign),
        1 => Ok(Label::Backdoor),
        _ => Err(SentinelError::InvalidArgument(format!(
            "{path}: bad label byte {b}"
        ))),
    }
}

fn decode_split(path: &str, b: u8) -> Result<Split> {
    match b {
        0 => Ok(Split::Train),
        1 => Ok(Split::Calibration),
        2 => Ok(Split::Test),
        _ => Err(SentinelError::InvalidArgument(format!(
            "{path}: bad split byte {b}"
        ))),
    }
}

fn decode_kind(path: &str, b: u8) -> Result<TraceKind> {
    match b {
        0 => Ok(TraceKind::Attention),
        1 => Ok(TraceKind::Activation),
        _ => Err(SentinelError::InvalidArgument(format!(
            "{path}: bad kind byte {b}"
        ))),
    }
}

/// Write a trace set. Layout: magic "SNTR", version u16, record count u64,
/// then per record: label u8, split u8, kind u8, layer u16, rows u32,
/// cols u32, payload rows*cols f32. All integers and floats little-endian.
pub fn write_traces(path: &Path, set: &TraceSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    w.write_all(&(set.records.len() as u64).to_le_bytes())?;
    for r in &set.records {
        w.write_all(&[label_code(r.label), split_code(r.split), kind_code(r.kind)])?;
        w.write_all(&r.layer.to_le_bytes())?;
        w.write_all(&(r.payload.rows() as u32).to_le_bytes())?;
        w.write_all(&(r.payload.cols() as u32).to_le_bytes())?;
        for &v in r.payload.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<TraceSet> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &display)?;
    if &magic != TRACE_MAGIC {
        return Err(SentinelError::BadMagic {
            path: display,
            expected: "SNTR",
        });
    }
    let version = read_u16(&mut r, &display)?;
    if version != TRACE_VERSION {
        return Err(SentinelError::VersionMismatch {
            path: display,
            found: version,
            expected: TRACE_VERSION,
        });
    }
    let count = read_u64(&mut r, &display)?;
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let mut tags = [0u8; 3];
        read_exact(&mut r, &mut tags, &display)?;
        let layer = read_u16(&mut r, &display)?;
        let rows = read_u32(&mut r, &display)? as usize;
        let cols = read_u32(&mut r, &display)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, &display)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        records.push(TraceRecord {
            label: decode_label(&display, tags[0])?,
            split: decode_split(&display, tags[1])?,
            kind: decode_kind(&display, tags[2])?,
            layer,
            payload: Matrix::from_vec(rows, cols, data)?,
        });
    }
    Ok(TraceSet::new(records))
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

fn read_u64(r: &mut impl Read, path: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}
