//! IDX (big-endian, MNIST-style) and CSV ingestion.

use std::fs;
use std::path::Path;

use super::dataset::{Dataset, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded IDX array, values widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub const IDX_UBYTE: u8 = 0x08;

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path)?;
    parse_idx(&bytes, path)
}

pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "truncated IDX magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(
            0,
            format!("bad IDX magic {:02x}{:02x}", bytes[0], bytes[1]),
        ));
    }
    let type_code = bytes[2];
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(err(3, "IDX array with zero dimensions".into()));
    }
    let width = match type_code {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        other => return Err(err(2, format!("unknown IDX element type {other:#04x}"))),
    };
    let header_end = 4 + 4 * ndim;
    if bytes.len() < header_end {
        return Err(err(bytes.len(), "truncated IDX dimension table".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header_end..];
    if body.len() != count * width {
        return Err(err(
            header_end + body.len().min(count * width),
            format!(
                "expected {} data bytes for dims {dims:?}, found {}",
                count * width,
                body.len()
            ),
        ));
    }
    let data = body
        .chunks_exact(width)
        .map(|c| match type_code {
            0x08 => c[0] as f64,
            0x09 => c[0] as i8 as f64,
            0x0B => i16::from_be_bytes([c[0], c[1]]) as f64,
            0x0C => i32::from_be_bytes(c.try_into().expect("4 bytes")) as f64,
            0x0D => f32::from_be_bytes(c.try_into().expect("4 bytes")) as f64,
            _ => f64::from_be_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    Ok(IdxArray { dims, data })
}

/// Image file (`N×…`, flattened to `N×features`, u8 scaled to [0,1]) plus a
/// label vector file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images)?;
    let img = parse_idx(&img_bytes, images)?;
    let lab = read_idx(labels)?;
    let n = img.dims[0];
    if lab.dims != [n] {
        return Err(Error::Dimension(format!(
            "{} images but label dims {:?}",
            n, lab.dims
        )));
    }
    let features: usize = img.dims[1..].iter().product::<usize>().max(1);
    let data = if img_bytes[2] == IDX_UBYTE {
        img.data.iter().map(|v| v / 255.0).collect()
    } else {
        img.data
    };
    let classes = lab.data.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1;
    Dataset::new(
        Tensor::new(vec![n, features], data)?,
        Tensor::new(vec![n], lab.data)?,
        Task::Classification { classes },
    )
}

/// One sample per row, target in the last column. A first row that does not
/// parse as numbers is treated as a header.
pub fn load_csv(path: &Path, classification: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e))?;
    let mut width = None;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_error(path, row, e))?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    row,
                    message: format!("non-numeric field: {e}"),
                })
            }
        };
        let w = *width.get_or_insert(values.len());
        if values.len() != w {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                row,
                message: format!("expected {w} fields, found {}", values.len()),
            });
        }
        if w < 2 {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                row,
                message: "need at least one feature and a target".into(),
            });
        }
        xs.extend_from_slice(&values[..w - 1]);
        ys.push(values[w - 1]);
        rows += 1;
    }
    let Some(w) = width else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: "no data rows".into(),
        });
    };
    let task = if classification {
        let classes = ys.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1;
        Task::Classification { classes }
    } else {
        Task::Regression
    };
    let targets = match task {
        Task::Classification { .. } => Tensor::new(vec![rows], ys)?,
        Task::Regression => Tensor::new(vec![rows, 1], ys)?,
    };
    Dataset::new(Tensor::new(vec![rows, w - 1], xs)?, targets, task)
}

fn csv_error(path: &Path, row: usize, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        message: e.to_string(),
    }
}

/// Encodes a u8 IDX file; handy for fixtures.
pub fn encode_idx_u8(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}
