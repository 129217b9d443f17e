//! Minimal NPY v1.0 reader and writer.
//!
//! Handles little-endian (or byte-order-free) `f4`, `f8`, `i4` and `i8`
//! arrays in C order. Big-endian data and Fortran-ordered arrays are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    fn descr(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::F64 => "<f8",
            DType::I32 => "<i4",
            DType::I64 => "<i8",
        }
    }
}

/// Decoded array payload.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    Float(Vec<f64>),
    Int(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: NpyData,
}

fn npy_err(path: &Path, field: &'static str, reason: impl Into<String>) -> Error {
    Error::Npy {
        path: path.to_path_buf(),
        field,
        reason: reason.into(),
    }
}

pub fn read(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, path)
}

pub fn parse(bytes: &[u8], path: &Path) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(npy_err(path, "magic", "missing \\x93NUMPY prefix"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if major != 1 {
        return Err(npy_err(
            path,
            "version",
            format!("{major}.{minor} (only 1.x is supported)"),
        ));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(npy_err(path, "header", "truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| npy_err(path, "header", "not ASCII"))?;
    let dict = HeaderDict::parse(header).map_err(|r| npy_err(path, "header", r))?;

    let descr = dict
        .descr
        .ok_or_else(|| npy_err(path, "descr", "missing key"))?;
    let dtype = parse_descr(&descr).map_err(|r| npy_err(path, "descr", r))?;
    match dict.fortran_order {
        Some(false) => {}
        Some(true) => return Err(npy_err(path, "fortran_order", "Fortran order unsupported")),
        None => return Err(npy_err(path, "fortran_order", "missing key")),
    }
    let shape = dict
        .shape
        .ok_or_else(|| npy_err(path, "shape", "missing key"))?;

    let count: usize = shape.iter().product();
    let payload = &bytes[data_start..];
    if payload.len() != count * dtype.size() {
        return Err(npy_err(
            path,
            "data",
            format!(
                "expected {} bytes for shape {:?}, found {}",
                count * dtype.size(),
                shape,
                payload.len()
            ),
        ));
    }
    let data = match dtype {
        DType::F32 => NpyData::Float(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        ),
        DType::F64 => NpyData::Float(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::I32 => NpyData::Int(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64)
                .collect(),
        ),
        DType::I64 => NpyData::Int(
            payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(NpyArray { dtype, shape, data })
}

fn parse_descr(descr: &str) -> std::result::Result<DType, String> {
    let mut chars = descr.chars();
    let order = chars.next().ok_or("empty descr")?;
    let kind = chars.as_str();
    match order {
        '<' | '|' | '=' => {}
        '>' => return Err(format!("big-endian dtype '{descr}' is not supported")),
        _ => return Err(format!("unrecognised dtype '{descr}'")),
    }
    match kind {
        "f4" => Ok(DType::F32),
        "f8" => Ok(DType::F64),
        "i4" => Ok(DType::I32),
        "i8" => Ok(DType::I64),
        _ => Err(format!("unsupported dtype '{descr}'")),
    }
}

#[derive(Default)]
struct HeaderDict {
    descr: Option<String>,
    fortran_order: Option<bool>,
    shape: Option<Vec<usize>>,
}

impl HeaderDict {
    /// Parses the python-literal dict written by `numpy.save`.
    fn parse(src: &str) -> std::result::Result<Self, String> {
        let s = src.trim_end_matches(['\n', ' ', '\0']).trim();
        let inner = s
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or("header is not a dict literal")?;
        let mut out = HeaderDict::default();
        let mut rest = inner.trim();
        while !rest.is_empty() {
            let (key, after) = take_quoted(rest).ok_or("expected quoted key")?;
            let after = after
                .trim_start()
                .strip_prefix(':')
                .ok_or("expected ':' after key")?
                .trim_start();
            let consumed = match key {
                "descr" => {
                    let (v, r) = take_quoted(after).ok_or("descr must be a string")?;
                    out.descr = Some(v.to_string());
                    r
                }
                "fortran_order" => {
                    if let Some(r) = after.strip_prefix("True") {
                        out.fortran_order = Some(true);
                        r
                    } else if let Some(r) = after.strip_prefix("False") {
                        out.fortran_order = Some(false);
                        r
                    } else {
                        return Err("fortran_order must be True or False".into());
                    }
                }
                "shape" => {
                    let body = after.strip_prefix('(').ok_or("shape must be a tuple")?;
                    let close = body.find(')').ok_or("unterminated shape tuple")?;
                    let dims = body[..close]
                        .split(',')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(|t| {
                            t.trim_end_matches('L')
                                .parse::<usize>()
                                .map_err(|_| format!("bad shape entry '{t}'"))
                        })
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    out.shape = Some(dims);
                    &body[close + 1..]
                }
                other => return Err(format!("unexpected key '{other}'")),
            };
            rest = consumed.trim_start();
            rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
        }
        Ok(out)
    }
}

fn take_quoted(s: &str) -> Option<(&str, &str)> {
    let q = s.chars().next()?;
    if q != '\'' && q != '"' {
        return None;
    }
    let body = &s[1..];
    let end = body.find(q)?;
    Some((&body[..end], &body[end + 1..]))
}

fn header_bytes(dtype: DType, shape: &[usize]) -> Vec<u8> {
    let shape_str = match shape {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape_str
    );
    // magic(6) + version(2) + len(2) + dict + '\n' padded to 64 bytes
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');
    let mut out = Vec::with_capacity(10 + dict.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

fn write_bytes(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(PathBuf::from(path), e))
}

/// Writes a 2-D `<f8` array.
pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let mut bytes = header_bytes(DType::F64, &[m.rows(), m.cols()]);
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path.as_ref(), bytes)
}

/// Writes a 2-D `<f4` array (values are rounded to single precision).
pub fn write_matrix_f32(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let mut bytes = header_bytes(DType::F32, &[m.rows(), m.cols()]);
    for v in m.as_slice() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_bytes(path.as_ref(), bytes)
}

/// Writes a 1-D `<i8` array.
pub fn write_labels(path: impl AsRef<Path>, labels: &[i64]) -> Result<()> {
    let mut bytes = header_bytes(DType::I64, &[labels.len()]);
    for v in labels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path.as_ref(), bytes)
}
