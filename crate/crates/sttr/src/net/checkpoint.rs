//! Versioned binary checkpoints: every learnable parameter and batch-norm
//! running statistic, as named little-endian f32 tensors.
//!
//! Layout: magic "STTR", version u32, tensor count u64, then per tensor:
//! name length u32 + UTF-8 name, rank u64, extents u64 each, f32 data.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::CheckpointError;
use crate::tensor::{Parameterized, Real, Tensor};

const MAGIC: &[u8; 4] = b"STTR";
const VERSION: u32 = 1;

pub fn save_checkpoint<F: Real, M: Parameterized<F>>(
    model: &M,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    let mut push = |name: &str, t: &Tensor<F>| {
        let data = t.data().iter().map(|&v| v.to_f64() as f32).collect();
        entries.push((name.to_string(), t.shape().to_vec(), data));
    };
    model.visit_params(&mut push);
    model.visit_state(&mut push);

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, shape, data) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    at: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.at + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Restores a model saved by `save_checkpoint`. Every stored tensor must
/// match the model's inventory by name and shape; nothing is written to the
/// model until the whole file validates.
pub fn load_checkpoint<F: Real, M: Parameterized<F>>(
    model: &mut M,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u64()? as usize;
    let mut stored: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Unknown(String::from_utf8_lossy(e.as_bytes()).into()))?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for chunk in r.take(numel * 4)?.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        stored.insert(name, (shape, data));
    }

    // Validate the full inventory before touching the model.
    let mut check: Option<CheckpointError> = None;
    let mut seen = 0usize;
    {
        let mut visit = |name: &str, t: &Tensor<F>| {
            if check.is_some() {
                return;
            }
            seen += 1;
            match stored.get(name) {
                None => check = Some(CheckpointError::Missing(name.to_string())),
                Some((shape, _)) if shape != t.shape() => {
                    check = Some(CheckpointError::ShapeMismatch {
                        name: name.to_string(),
                        expected: t.shape().to_vec(),
                        found: shape.clone(),
                    })
                }
                Some(_) => {}
            }
        };
        model.visit_params(&mut visit);
        model.visit_state(&mut visit);
    }
    if let Some(err) = check {
        return Err(err);
    }
    if stored.len() != seen {
        let mut names: Vec<&String> = stored.keys().collect();
        names.sort();
        let mut model_names = Vec::new();
        let mut collect = |name: &str, _: &Tensor<F>| model_names.push(name.to_string());
        model.visit_params(&mut collect);
        model.visit_state(&mut collect);
        let extra = names
            .into_iter()
            .find(|n| !model_names.iter().any(|m| m == *n))
            .expect("count mismatch implies an extra name");
        return Err(CheckpointError::Unknown(extra.clone()));
    }

    let mut apply = |name: &str, t: &mut Tensor<F>| {
        let (_, data) = &stored[name];
        for (dst, &src) in t.data_mut().iter_mut().zip(data) {
            *dst = F::of(src as f64);
        }
    };
    model.visit_params_mut(&mut apply);
    model.visit_state_mut(&mut apply);
    Ok(())
}
