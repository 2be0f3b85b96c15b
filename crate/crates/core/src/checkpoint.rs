//! `TSCK` checkpoint container.
//!
//! Layout (little-endian): magic `TSCK`, version `u32`, entry count `u32`, then
//! per entry: name length `u16`, UTF-8 name, rank `u8`, `rank` extents as
//! `u32`, and the `f32` payload. Batch-norm running statistics are stored as
//! `<layer>.running_mean` / `<layer>.running_var` entries. Optimizer state is
//! not stored.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{write_atomic, Reader};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TSCK";
pub const VERSION: u32 = 1;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut entries: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for (name, t) in store.iter() {
        let data = t.data().iter().map(|v| v.as_f64() as f32).collect();
        entries.insert(name.to_string(), (t.shape().to_vec(), data));
    }
    for (name, s) in store.norms() {
        let to_f32 = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
        entries.insert(
            format!("{name}{RUNNING_MEAN}"),
            (vec![s.channels()], to_f32(&s.running_mean)),
        );
        entries.insert(
            format!("{name}{RUNNING_VAR}"),
            (vec![s.channels()], to_f32(&s.running_var)),
        );
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, (shape, data)) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint into `(name, tensor)` entries in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "expected magic \"TSCK\", found {:?}",
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let version_at = r.offset();
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: version_at,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_at = r.offset();
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format {
                offset: name_at,
                message: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32()?);
        }
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
            offset: name_at,
            message: format!("entry {name}: {e}"),
        })?;
        entries.push((name, t));
    }
    if !r.is_empty() {
        return Err(Error::Format {
            offset: r.offset(),
            message: "trailing bytes after last entry".into(),
        });
    }
    Ok(entries)
}

pub fn write<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    write_atomic(path, &encode(store))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Overwrites `store` values and running statistics from checkpoint entries.
/// The entry set must match the store's architecture exactly.
pub fn load_into<T: Real>(
    store: &mut ParamStore<T>,
    entries: &[(String, Tensor<f32>)],
) -> Result<()> {
    let expected = store.len() + 2 * store.norms().count();
    if entries.len() != expected {
        return Err(Error::Config(format!(
            "checkpoint has {} entries, architecture needs {expected}",
            entries.len()
        )));
    }
    for (name, t) in entries {
        let value: Tensor<T> = t.cast();
        if let Some(layer) = name.strip_suffix(RUNNING_MEAN) {
            let st = store.norm_mut(layer)?;
            check_len(name, st.running_mean.len(), &value)?;
            st.running_mean = value.into_data();
        } else if let Some(layer) = name.strip_suffix(RUNNING_VAR) {
            let st = store.norm_mut(layer)?;
            check_len(name, st.running_var.len(), &value)?;
            st.running_var = value.into_data();
        } else {
            let slot = store.get_mut(name)?;
            if slot.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint entry {name} has shape {:?}, architecture expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
    }
    Ok(())
}

fn check_len<T: Real>(name: &str, expected: usize, t: &Tensor<T>) -> Result<()> {
    if t.shape() != [expected] {
        return Err(Error::Config(format!(
            "checkpoint entry {name} has shape {:?}, expected [{expected}]",
            t.shape()
        )));
    }
    Ok(())
}
