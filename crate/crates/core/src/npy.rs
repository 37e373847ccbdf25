//! NPY v1.0 reader and writer for little-endian, C-order `float32` and
//! `int32` arrays. One array per file.
//!
//! Format reference: <https://numpy.org/doc/stable/reference/generated/numpy.lib.format.html>

use std::fs;
use std::path::Path;

use crate::error::NpyError;
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
/// Magic + version + header-length field.
const PREAMBLE: usize = 10;
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum NpyArray {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl NpyArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32 { shape, .. } | Self::I32 { shape, .. } => shape,
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            Self::F32 { .. } => "float32",
            Self::I32 { .. } => "int32",
        }
    }

    pub fn into_tensor(self) -> Result<Tensor, NpyError> {
        match self {
            Self::F32 { shape, data } => Ok(Tensor::new(shape, data)?),
            other => Err(NpyError::WrongDtype {
                expected: "float32",
                found: other.dtype_name(),
            }),
        }
    }

    pub fn into_i32(self) -> Result<(Vec<usize>, Vec<i32>), NpyError> {
        match self {
            Self::I32 { shape, data } => Ok((shape, data)),
            other => Err(NpyError::WrongDtype {
                expected: "int32",
                found: other.dtype_name(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F32,
    I32,
}

struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

/// Parses an in-memory NPY file.
pub fn parse(bytes: &[u8]) -> Result<NpyArray, NpyError> {
    if bytes.len() < PREAMBLE || &bytes[..6] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(NpyError::UnsupportedVersion { major, minor });
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header_end = PREAMBLE + header_len;
    if bytes.len() < header_end {
        return Err(NpyError::BadHeader("header extends past end of file".into()));
    }
    let text = std::str::from_utf8(&bytes[PREAMBLE..header_end])
        .map_err(|_| NpyError::BadHeader("header is not ASCII".into()))?;
    let header = parse_header(text)?;

    let count: usize = header.shape.iter().product();
    let expected = count * 4;
    let payload = &bytes[header_end..];
    if payload.len() < expected {
        return Err(NpyError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let words = payload[..expected].chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    Ok(match header.dtype {
        Dtype::F32 => NpyArray::F32 {
            shape: header.shape,
            data: words.map(f32::from_le_bytes).collect(),
        },
        Dtype::I32 => NpyArray::I32 {
            shape: header.shape,
            data: words.map(i32::from_le_bytes).collect(),
        },
    })
}

fn parse_header(text: &str) -> Result<Header, NpyError> {
    let descr = quoted_value(text, "descr")?;
    let dtype = match descr.as_str() {
        "<f4" => Dtype::F32,
        "<i4" => Dtype::I32,
        _ => return Err(NpyError::UnsupportedDtype(descr)),
    };
    match raw_value(text, "fortran_order")? {
        v if v.starts_with("False") => {}
        v if v.starts_with("True") => return Err(NpyError::FortranOrder),
        v => return Err(NpyError::BadHeader(format!("fortran_order: {v:.10}"))),
    }
    let shape_src = raw_value(text, "shape")?;
    let inner = shape_src
        .strip_prefix('(')
        .and_then(|s| s.split_once(')'))
        .map(|(inside, _)| inside)
        .ok_or_else(|| NpyError::BadHeader("shape is not a tuple".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| NpyError::BadHeader(format!("bad shape extent '{s}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if shape.is_empty() {
        return Err(NpyError::UnsupportedRank(0));
    }
    Ok(Header { dtype, shape })
}

/// Text following `'key':`, with leading whitespace stripped.
fn raw_value<'a>(text: &'a str, key: &str) -> Result<&'a str, NpyError> {
    for quote in ['\'', '"'] {
        let needle = format!("{quote}{key}{quote}");
        if let Some(pos) = text.find(&needle) {
            let rest = text[pos + needle.len()..].trim_start();
            let rest = rest
                .strip_prefix(':')
                .ok_or_else(|| NpyError::BadHeader(format!("no ':' after '{key}'")))?;
            return Ok(rest.trim_start());
        }
    }
    Err(NpyError::BadHeader(format!("missing key '{key}'")))
}

fn quoted_value(text: &str, key: &str) -> Result<String, NpyError> {
    let rest = raw_value(text, key)?;
    let quote = rest
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| NpyError::BadHeader(format!("'{key}' is not a string")))?;
    rest[1..]
        .split_once(quote)
        .map(|(v, _)| v.to_owned())
        .ok_or_else(|| NpyError::BadHeader(format!("unterminated string for '{key}'")))
}

fn encode(descr: &str, shape: &[usize], payload: impl Iterator<Item = [u8; 4]>) -> Vec<u8> {
    let dims = match shape {
        [one] => format!("({one},)"),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {dims}, }}");
    let unpadded = PREAMBLE + header.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + shape.iter().product::<usize>() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for word in payload {
        out.extend_from_slice(&word);
    }
    out
}

pub fn encode_f32(t: &Tensor) -> Vec<u8> {
    encode("<f4", t.shape(), t.data().iter().map(|v| v.to_le_bytes()))
}

pub fn encode_i32(shape: &[usize], data: &[i32]) -> Vec<u8> {
    encode("<i4", shape, data.iter().map(|v| v.to_le_bytes()))
}

pub fn read_array(path: &Path) -> Result<NpyArray, NpyError> {
    let bytes = fs::read(path).map_err(|source| NpyError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse(&bytes)
}

/// Reads a `float32` array as a [`Tensor`].
pub fn read_tensor(path: &Path) -> Result<Tensor, NpyError> {
    read_array(path)?.into_tensor()
}

pub fn write_array(path: &Path, t: &Tensor) -> Result<(), NpyError> {
    write_bytes(path, &encode_f32(t))
}

pub fn write_i32(path: &Path, shape: &[usize], data: &[i32]) -> Result<(), NpyError> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(NpyError::BadHeader(format!(
            "shape {shape:?} does not match {} values",
            data.len()
        )));
    }
    write_bytes(path, &encode_i32(shape, data))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), NpyError> {
    fs::write(path, bytes).map_err(|source| NpyError::Io {
        path: path.to_owned(),
        source,
    })
}
