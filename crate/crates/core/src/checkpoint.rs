//! `HGCL-EMB v1` embedding tables: a UTF-8 header line
//! `HGCL-EMB v1 rows=<r> d=<d>` followed by `r*d` little-endian f64 values,
//! row-major. A file may hold several blocks back to back.

use std::fs;
use std::path::Path;

use crate::error::{HgclError, Result};
use crate::matrix::Matrix;

const MAGIC: &str = "HGCL-EMB v1";

pub fn encode_block(m: &Matrix, out: &mut Vec<u8>) {
    out.extend_from_slice(format!("{MAGIC} rows={} d={}\n", m.rows(), m.cols()).as_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_blocks(bytes: &[u8], path: &Path) -> Result<Vec<Matrix>> {
    let bad = |msg: String| HgclError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut blocks = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(format!("missing header terminator at byte {pos}")))?;
        let header = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| bad(format!("header at byte {pos} is not UTF-8")))?;
        let (rows, d) = parse_header(header).ok_or_else(|| bad(format!("malformed header `{header}`")))?;
        pos += nl + 1;
        let len = rows
            .checked_mul(d)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| bad("size overflow".into()))?;
        if bytes.len() - pos < len {
            return Err(bad(format!(
                "block {} declares {len} data bytes, {} remain",
                blocks.len(),
                bytes.len() - pos
            )));
        }
        let data = bytes[pos..pos + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        pos += len;
        blocks.push(Matrix::from_vec(rows, d, data));
    }
    if blocks.is_empty() {
        return Err(bad("no blocks".into()));
    }
    Ok(blocks)
}

fn parse_header(h: &str) -> Option<(usize, usize)> {
    let rest = h.strip_prefix(MAGIC)?;
    let mut it = rest.split_whitespace();
    let rows = it.next()?.strip_prefix("rows=")?.parse().ok()?;
    let d = it.next()?.strip_prefix("d=")?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some((rows, d))
}

pub fn write_checkpoint(path: &Path, blocks: &[&Matrix]) -> Result<()> {
    let mut out = Vec::new();
    for b in blocks {
        encode_block(b, &mut out);
    }
    fs::write(path, out).map_err(|e| HgclError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Matrix>> {
    let bytes = fs::read(path).map_err(|e| HgclError::io(path, e))?;
    decode_blocks(&bytes, path)
}

/// Reads a checkpoint that must hold exactly `count` blocks.
pub fn read_blocks(path: &Path, count: usize) -> Result<Vec<Matrix>> {
    let blocks = read_checkpoint(path)?;
    if blocks.len() != count {
        return Err(HgclError::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("expected {count} blocks, found {}", blocks.len()),
        });
    }
    Ok(blocks)
}
