//! Matrix files: the binary ESIM container and plain CSV.
//!
//! ESIM layout: the bytes `ESIM`, rows and cols as little-endian u32, then
//! rows * cols little-endian f64 values in row-major order.

use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"ESIM";
const HEADER: usize = 12;

pub fn encode_esim(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn decode_esim(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(CliError::format(path, "not an ESIM matrix (bad magic)"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER));
    if expected != Some(bytes.len()) {
        return Err(CliError::format(
            path,
            format!("{rows}x{cols} header does not match {} bytes", bytes.len()),
        ));
    }
    let values = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    Ok(DMatrix::from_row_iterator(rows, cols, values))
}

/// Writes a matrix with a `c0,c1,...` header row.
pub fn encode_csv(m: &DMatrix<f64>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record((0..m.ncols()).map(|c| format!("c{c}")))
        .expect("in-memory write");
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))
            .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Reads a numeric CSV; a first row that is not all numbers is taken as a header.
pub fn decode_csv(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(CliError::format(path, format!("line {}: {e}", i + 1))),
        };
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(CliError::format(
                    path,
                    format!("line {}: {} fields, expected {c}", i + 1, row.len()),
                ))
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| CliError::format(path, "no numeric rows"))?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads ESIM, or CSV when the extension is `.csv`.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    if is_csv(path) {
        decode_csv(&bytes, path)
    } else {
        decode_esim(&bytes, path)
    }
}

/// Writes ESIM, or CSV when the extension is `.csv`; returns the bytes' SHA-256.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<String> {
    let bytes = if is_csv(path) { encode_csv(m) } else { encode_esim(m) };
    write_bytes(path, &bytes)
}

/// Writes a file and returns the hex SHA-256 of its contents.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<String> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
