//! Model checkpoint format.
//!
//! Layout: magic "SNMD", version u16, config block (seven u32 fields plus a
//! u64 seed), adapter block (flag u8; if set, rank u32 and alpha f64), then
//! tensor count u32 and named tensors: name length u16, UTF-8 name, rows
//! u32, cols u32, row-major f32 data. Everything little-endian. Tensors are
//! written in parameter declaration order; adapter factors are named
//! `adapter{layer}.{site}.{a|b}` and are reassembled on load.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SentinelError};
use crate::linalg::Matrix;

use super::model::{LayerAdapters, LowRankAdapter};
use super::{ToyConfig, ToyModel};

pub const MODEL_MAGIC: &[u8; 4] = b"SNMD";
pub const MODEL_VERSION: u16 = 1;

pub fn write_checkpoint(path: &Path, model: &ToyModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    let cfg = &model.config;
    for v in [
        cfg.vocab_size,
        cfg.seq_len,
        cfg.d_model,
        cfg.n_heads,
        cfg.n_layers,
        cfg.trigger_token,
        cfg.harmful_token,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&cfg.seed.to_le_bytes())?;

    if let Some(ad) = model.adapters.values().next() {
        w.write_all(&[1u8])?;
        w.write_all(&(ad.wq.rank as u32).to_le_bytes())?;
        w.write_all(&ad.wq.alpha.to_le_bytes())?;
    } else {
        w.write_all(&[0u8])?;
    }

    let named = model.named_params();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, m, _) in named {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for &v in m.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ToyModel> {
    let display = path.display().to_string();
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &display)?;
    if &magic != MODEL_MAGIC {
        return Err(SentinelError::BadMagic {
            path: display,
            expected: "SNMD",
        });
    }
    let version = read_u16(&mut r, &display)?;
    if version != MODEL_VERSION {
        return Err(SentinelError::VersionMismatch {
            path: display,
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let mut cfg_fields = [0usize; 7];
    for f in &mut cfg_fields {
        *f = read_u32(&mut r, &display)? as usize;
    }
    let seed = read_u64(&mut r, &display)?;
    let config = ToyConfig {
        vocab_size: cfg_fields[0],
        seq_len: cfg_fields[1],
        d_model: cfg_fields[2],
        n_heads: cfg_fields[3],
        n_layers: cfg_fields[4],
        trigger_token: cfg_fields[5],
        harmful_token: cfg_fields[6],
        seed,
    };

    let mut flag = [0u8; 1];
    read_exact(&mut r, &mut flag, &display)?;
    let adapter_cfg = if flag[0] == 1 {
        let rank = read_u32(&mut r, &display)? as usize;
        let mut ab = [0u8; 8];
        read_exact(&mut r, &mut ab, &display)?;
        Some((rank, f64::from_le_bytes(ab)))
    } else {
        None
    };

    let count = read_u32(&mut r, &display)?;
    let mut tensors: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
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
        order.push(name.clone());
        tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
    }

    let mut model = ToyModel::init(&config)?;
    // Overwrite the fresh init with stored base tensors.
    let base_shapes: Vec<(String, (usize, usize))> = model
        .named_params()
        .into_iter()
        .map(|(n, m, _)| (n, m.shape()))
        .collect();
    for (name, shape) in base_shapes {
        if name.starts_with("adapter") {
            continue;
        }
        let t = tensors.remove(&name).ok_or_else(|| {
            SentinelError::InvalidArgument(format!("{display}: missing tensor `{name}`"))
        })?;
        if t.shape() != shape {
            return Err(SentinelError::ShapeMismatch(format!(
                "{display}: tensor `{name}` is {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        model.with_param_mut(&name, |m| *m = t);
    }

    if let Some((rank, alpha)) = adapter_cfg {
        let mut layers: Vec<usize> = order
            .iter()
            .filter_map(|n| {
                n.strip_prefix("adapter")
                    .and_then(|rest| rest.split_once('.'))
                    .and_then(|(l, _)| l.parse::<usize>().ok())
            })
            .collect();
        layers.sort_unstable();
        layers.dedup();
        for l in layers {
            let mut take = |site: &str, factor: &str| -> Result<Matrix> {
                let key = format!("adapter{l}.{site}.{factor}");
                tensors.remove(&key).ok_or_else(|| {
                    SentinelError::InvalidArgument(format!("{display}: missing tensor `{key}`"))
                })
            };
            let build = |a: Matrix, b: Matrix| LowRankAdapter { a, b, rank, alpha };
            let ad = LayerAdapters {
                wq: build(take("wq", "a")?, take("wq", "b")?),
                wk: build(take("wk", "a")?, take("wk", "b")?),
                wv: build(take("wv", "a")?, take("wv", "b")?),
                w_in: build(take("w_in", "a")?, take("w_in", "b")?),
            };
            model.adapters.insert(l, ad);
        }
    }
    Ok(model)
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

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_clean(model: &mut ToyModel) {
        // Round every parameter to its f32 representation so a write/read
        // cycle is the identity.
        let names: Vec<String> = model
            .named_params()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect();
        for name in names {
            model.with_param_mut(&name, |m| {
                for v in m.data_mut() {
                    *v = *v as f32 as f64;
                }
            });
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ToyConfig {
            vocab_size: 10,
            seq_len: 5,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            trigger_token: 8,
            harmful_token: 9,
            seed: 4,
        };
        let mut model = ToyModel::init(&cfg).unwrap();
        model.attach_adapters(&[1], 2, 8.0, 7).unwrap();
        f32_clean(&mut model);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.snmd");
        write_checkpoint(&path, &model).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.params, model.params);
        assert_eq!(back.adapters, model.adapters);

        // Byte-level round trip.
        let path2 = dir.path().join("m2.snmd");
        write_checkpoint(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn checkpoint_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.snmd");
        std::fs::write(&path, b"XXXX0123456789").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(SentinelError::BadMagic { .. })
        ));
    }
}
