//! Attention-map artifacts: square matrices as CSV and as 8-bit PGM
//! grayscale images (row-major, scaled so the matrix maximum maps to 255).

use std::fs;
use std::path::Path;

use crate::error::DataError;
use crate::tensor::{Real, Tensor};

fn require_matrix<F: Real>(m: &Tensor<F>) -> Result<(usize, usize), DataError> {
    if m.rank() != 2 {
        return Err(DataError::Matrix(format!("expected a matrix, got shape {:?}", m.shape())));
    }
    Ok((m.shape()[0], m.shape()[1]))
}

pub fn write_matrix_csv<F: Real>(path: &Path, m: &Tensor<F>) -> Result<(), DataError> {
    let (rows, cols) = require_matrix(m)?;
    let mut text = String::new();
    for r in 0..rows {
        let row: Vec<String> =
            (0..cols).map(|c| format!("{}", m.at(&[r, c]).to_f64())).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor<f64>, DataError> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse()
                    .map_err(|_| DataError::Matrix(format!("bad number {f:?} in {path:?}")))
            })
            .collect::<Result<_, _>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(DataError::Matrix(format!("ragged rows in {path:?}")));
            }
            _ => {}
        }
        rows += 1;
        data.extend(row);
    }
    let cols = cols.ok_or_else(|| DataError::Matrix(format!("{path:?} is empty")))?;
    Tensor::new(vec![rows, cols], data)
        .map_err(|e| DataError::Matrix(format!("{path:?}: {e}")))
}

/// Writes `m` as binary PGM ("P5"), one byte per cell, row-major, values
/// scaled so the matrix maximum becomes 255. Requires non-negative entries.
pub fn write_pgm<F: Real>(path: &Path, m: &Tensor<F>) -> Result<(), DataError> {
    let (rows, cols) = require_matrix(m)?;
    let mut max = 0.0f64;
    for v in m.iter_f64() {
        if !v.is_finite() || v < 0.0 {
            return Err(DataError::Matrix(format!("value {v} not renderable in {path:?}")));
        }
        max = max.max(v);
    }
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut buf = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    buf.extend(m.iter_f64().map(|v| (v * scale).round() as u8));
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a binary PGM written by [`write_pgm`]: (rows, cols, bytes).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let buf = fs::read(path)?;
    let bad = |what: &str| DataError::Matrix(format!("{path:?}: {what}"));
    // Header: three whitespace-separated tokens after "P5", then one byte of
    // whitespace before the payload.
    let header_end = buf
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0].is_ascii_whitespace())
        .nth(3)
        .map(|(i, _)| i)
        .ok_or_else(|| bad("truncated header"))?;
    let header =
        std::str::from_utf8(&buf[..header_end]).map_err(|_| bad("non-ascii header"))?;
    let mut tokens = header.split_ascii_whitespace();
    if tokens.next() != Some("P5") {
        return Err(bad("not a binary PGM"));
    }
    let mut dim = || {
        tokens
            .next()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| bad("bad dimensions"))
    };
    let (cols, rows, maxval) = (dim()?, dim()?, dim()?);
    if maxval != 255 {
        return Err(bad("expected 8-bit maxval 255"));
    }
    let pixels = &buf[header_end + 1..];
    if pixels.len() != rows * cols {
        return Err(bad("payload length does not match dimensions"));
    }
    Ok((rows, cols, pixels.to_vec()))
}
