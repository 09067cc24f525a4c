//! Minimal NPY (v1.0 write, v1/v2/v3 read) support for little-endian float arrays.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Shape};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// A dense C-order array as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NpyArray {
    /// Views the array as `shape[0]` rows of flattened trailing dimensions.
    pub fn rows(&self) -> Result<Vec<Vec<f64>>> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::Npy("0-d array has no rows".into()))?;
        if n == 0 {
            return Ok(Vec::new());
        }
        let d = self.data.len() / n;
        Ok(self
            .data
            .chunks_exact(d.max(1))
            .map(<[f64]>::to_vec)
            .collect())
    }
}

fn header_text(descr: &str, shape: &[usize]) -> Vec<u8> {
    let dims = match shape {
        [one] => format!("({one},)"),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header =
        format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {dims}, }}").into_bytes();
    // magic(6) + version(2) + len(2) + header, padded with spaces to a
    // multiple of 64 and terminated by '\n'.
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat_n(b' ', pad));
    header.push(b'\n');
    header
}

pub fn encode_f32(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::Npy(format!(
            "shape {shape:?} needs {expected} values, got {}",
            data.len()
        )));
    }
    let header = header_text("<f4", shape);
    let header_len = u16::try_from(header.len())
        .map_err(|_| Error::Npy("header longer than 65535 bytes".into()))?;
    let mut out = Vec::with_capacity(10 + header.len() + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_f32(path: impl AsRef<Path>, shape: &[usize], data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_f32(shape, data)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &LatentTensor) -> Result<()> {
    let s = tensor.shape();
    write_f32(path, &[s.channels, s.height, s.width], tensor.data())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Dtype {
    F4,
    F8,
}

struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
    data_offset: usize,
}

fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let needle = format!("'{key}'");
    let start = dict
        .find(&needle)
        .ok_or_else(|| Error::Npy(format!("header lacks {needle}")))?;
    let rest = dict[start + needle.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| Error::Npy(format!("malformed entry for {needle}")))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else if let Some(quoted) = rest.strip_prefix('\'') {
        quoted.find('\'').map(|i| i + 2)
    } else {
        rest.find([',', '}'])
    }
    .ok_or_else(|| Error::Npy(format!("unterminated value for {needle}")))?;
    Ok(rest[..end].trim())
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Npy("missing NPY magic".into()));
    }
    let (len, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::Npy("truncated header".into()));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        v => return Err(Error::Npy(format!("unsupported format version {v}"))),
    };
    let dict = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Npy("truncated header".into()))?;
    let dict = std::str::from_utf8(dict).map_err(|_| Error::Npy("header is not text".into()))?;

    let dtype = match dict_value(dict, "descr")?.trim_matches('\'') {
        "<f4" => Dtype::F4,
        "<f8" => Dtype::F8,
        other => return Err(Error::Npy(format!("unsupported dtype {other}"))),
    };
    if dict_value(dict, "fortran_order")? != "False" {
        return Err(Error::Npy("only C-order arrays are supported".into()));
    }
    let shape = dict_value(dict, "shape")?
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Npy(format!("bad dimension `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Header {
        dtype,
        shape,
        data_offset: start + len,
    })
}

pub fn decode(bytes: &[u8]) -> Result<NpyArray> {
    let header = parse_header(bytes)?;
    let count: usize = header.shape.iter().product();
    let body = &bytes[header.data_offset..];
    let width = match header.dtype {
        Dtype::F4 => 4,
        Dtype::F8 => 8,
    };
    if body.len() != count * width {
        return Err(Error::Npy(format!(
            "expected {} data bytes, found {}",
            count * width,
            body.len()
        )));
    }
    let data = match header.dtype {
        Dtype::F4 => body
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect(),
        Dtype::F8 => body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect(),
    };
    Ok(NpyArray {
        shape: header.shape,
        data,
    })
}

pub fn read(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a `(C, H, W)` float32 tensor.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<LatentTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes)?;
    if header.dtype != Dtype::F4 {
        return Err(Error::Npy("latent tensors must be <f4".into()));
    }
    let [c, h, w] = header.shape[..] else {
        return Err(Error::Npy(format!(
            "expected a (C, H, W) array, got shape {:?}",
            header.shape
        )));
    };
    let body = &bytes[header.data_offset..];
    if body.len() != c * h * w * 4 {
        return Err(Error::Npy("data length does not match shape".into()));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    LatentTensor::from_vec(Shape::new(c, h, w), data)
}
