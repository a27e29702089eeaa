//! NPY v1.0 reading and writing.
//!
//! Only the subset needed for feature exchange is supported: little-endian
//! `<f4`/`<f8` payloads in C order, with one or two dimensions. Writes always
//! emit `<f8` with a two-dimensional shape. Label files may additionally use
//! little-endian integer dtypes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
    I1,
    I2,
    I4,
    I8,
    U1,
    U2,
    U4,
    U8,
}

impl Dtype {
    fn parse(descr: &str) -> Result<Self> {
        let (order, kind) = descr.split_at(descr.len().min(1));
        match order {
            "<" | "|" => {}
            ">" => {
                return Err(Error::UnsupportedLayout(format!(
                    "big-endian dtype {descr:?}"
                )))
            }
            "=" => {
                return Err(Error::UnsupportedLayout(format!(
                    "native-order dtype {descr:?}"
                )))
            }
            _ => return Err(Error::Format(format!("dtype descriptor {descr:?}"))),
        }
        Ok(match kind {
            "f4" => Dtype::F4,
            "f8" => Dtype::F8,
            "i1" => Dtype::I1,
            "i2" => Dtype::I2,
            "i4" => Dtype::I4,
            "i8" => Dtype::I8,
            "u1" => Dtype::U1,
            "u2" => Dtype::U2,
            "u4" => Dtype::U4,
            "u8" => Dtype::U8,
            _ => {
                return Err(Error::UnsupportedLayout(format!(
                    "dtype {descr:?} is not supported"
                )))
            }
        })
    }

    fn size(self) -> usize {
        match self {
            Dtype::I1 | Dtype::U1 => 1,
            Dtype::I2 | Dtype::U2 => 2,
            Dtype::F4 | Dtype::I4 | Dtype::U4 => 4,
            Dtype::F8 | Dtype::I8 | Dtype::U8 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Dtype::F4 | Dtype::F8)
    }
}

#[derive(Debug)]
struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

/// Loads an NPY file as a matrix. One-dimensional arrays become `1 x n`.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_matrix(&mut bytes.as_slice())
}

/// Reads a float matrix from an NPY byte stream.
pub fn read_matrix<R: Read>(reader: &mut R) -> Result<Matrix> {
    let header = read_header(reader)?;
    if !header.dtype.is_float() {
        return Err(Error::UnsupportedLayout(
            "integer dtype where float features were expected".into(),
        ));
    }
    let (rows, cols) = matrix_shape(&header.shape)?;
    let payload = read_payload(reader, rows * cols, header.dtype)?;
    let data: Vec<f64> = match header.dtype {
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Matrix::new(rows, cols, data)
}

/// Loads a 1-D (or `n x 1` / `1 x n`) label file as integers.
///
/// Float label files are accepted when every entry is integral.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<i64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = bytes.as_slice();
    let header = read_header(&mut reader)?;
    let (rows, cols) = matrix_shape(&header.shape)?;
    if rows > 1 && cols > 1 {
        return Err(Error::Format(format!(
            "labels must be a vector, got shape {rows}x{cols}"
        )));
    }
    let count = rows * cols;
    let payload = read_payload(&mut reader, count, header.dtype)?;
    let size = header.dtype.size();
    let mut labels = Vec::with_capacity(count);
    for (index, c) in payload.chunks_exact(size).enumerate() {
        let value = match header.dtype {
            Dtype::I1 => i64::from(c[0] as i8),
            Dtype::U1 => i64::from(c[0]),
            Dtype::I2 => i64::from(i16::from_le_bytes([c[0], c[1]])),
            Dtype::U2 => i64::from(u16::from_le_bytes([c[0], c[1]])),
            Dtype::I4 => i64::from(i32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            Dtype::U4 => i64::from(u32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            Dtype::I8 => i64::from_le_bytes(c.try_into().expect("8-byte chunk")),
            Dtype::U8 => {
                let v = u64::from_le_bytes(c.try_into().expect("8-byte chunk"));
                i64::try_from(v).map_err(|_| Error::Format(format!("label {v} overflows i64")))?
            }
            Dtype::F4 | Dtype::F8 => {
                let v = if header.dtype == Dtype::F4 {
                    f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                } else {
                    f64::from_le_bytes(c.try_into().expect("8-byte chunk"))
                };
                if !v.is_finite() || v.fract() != 0.0 {
                    return Err(Error::NonFinite { index, value: v });
                }
                v as i64
            }
        };
        labels.push(value);
    }
    Ok(labels)
}

/// Writes a matrix as NPY v1.0 `<f8`, C order.
pub fn write_matrix(matrix: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(128 + matrix.as_slice().len() * 8);
    write_matrix_to(matrix, &mut bytes).map_err(|e| Error::io(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serializes a matrix as NPY v1.0 to any writer.
pub fn write_matrix_to<W: Write>(matrix: &Matrix, writer: &mut W) -> std::io::Result<()> {
    let dict = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}), }}",
        matrix.rows(),
        matrix.cols()
    );
    // preamble: magic (6) + version (2) + header length (2)
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let total = unpadded.div_ceil(ALIGN) * ALIGN;
    let header_len = total - (MAGIC.len() + 4);
    let mut header = dict.into_bytes();
    header.resize(header_len - 1, b' ');
    header.push(b'\n');

    writer.write_all(MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(header_len as u16).to_le_bytes())?;
    writer.write_all(&header)?;
    for v in matrix.as_slice() {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn matrix_shape(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((1, n)),
        [r, c] => Ok((r, c)),
        _ => Err(Error::UnsupportedLayout(format!(
            "expected 1 or 2 dimensions, got {}",
            shape.len()
        ))),
    }
}

fn read_payload<R: Read>(reader: &mut R, count: usize, dtype: Dtype) -> Result<Vec<u8>> {
    let len = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let mut payload = vec![0u8; len];
    reader
        .read_exact(&mut payload)
        .map_err(|_| Error::Format(format!("payload shorter than {len} bytes")))?;
    Ok(payload)
}

fn read_header<R: Read>(reader: &mut R) -> Result<Header> {
    let mut preamble = [0u8; 10];
    reader
        .read_exact(&mut preamble)
        .map_err(|_| Error::Format("file shorter than npy preamble".into()))?;
    if &preamble[..6] != MAGIC {
        return Err(Error::Format("missing \\x93NUMPY magic".into()));
    }
    if preamble[6..8] != [1, 0] {
        return Err(Error::Format(format!(
            "unsupported npy version {}.{}",
            preamble[6], preamble[7]
        )));
    }
    let header_len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut raw = vec![0u8; header_len];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let text = std::str::from_utf8(&raw).map_err(|_| Error::Format("header is not ASCII".into()))?;
    parse_header_dict(text)
}

fn parse_header_dict(text: &str) -> Result<Header> {
    let mut p = DictParser {
        s: text.as_bytes(),
        pos: 0,
    };
    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;

    p.skip_ws();
    p.expect(b'{')?;
    loop {
        p.skip_ws();
        if p.eat(b'}') {
            break;
        }
        let key = p.string()?;
        p.skip_ws();
        p.expect(b':')?;
        p.skip_ws();
        match key.as_str() {
            "descr" => descr = Some(p.string()?),
            "fortran_order" => fortran = Some(p.boolean()?),
            "shape" => shape = Some(p.tuple()?),
            other => return Err(Error::Format(format!("unexpected header key {other:?}"))),
        }
        p.skip_ws();
        if !p.eat(b',') {
            p.skip_ws();
            p.expect(b'}')?;
            break;
        }
    }

    let descr = descr.ok_or_else(|| Error::Format("header missing 'descr'".into()))?;
    let fortran_order =
        fortran.ok_or_else(|| Error::Format("header missing 'fortran_order'".into()))?;
    let shape = shape.ok_or_else(|| Error::Format("header missing 'shape'".into()))?;
    let dtype = Dtype::parse(&descr)?;
    if fortran_order {
        return Err(Error::UnsupportedLayout("Fortran-order arrays".into()));
    }
    Ok(Header { dtype, shape })
}

struct DictParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl DictParser<'_> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected '{}' at header offset {}",
                c as char, self.pos
            )))
        }
    }

    fn string(&mut self) -> Result<String> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(Error::Format(format!("expected string at {}", self.pos))),
        };
        self.pos += 1;
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c == quote {
                let s = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
                self.pos += 1;
                return Ok(s);
            }
            self.pos += 1;
        }
        Err(Error::Format("unterminated string in header".into()))
    }

    fn boolean(&mut self) -> Result<bool> {
        let rest = &self.s[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err(Error::Format(format!("expected True/False at {}", self.pos)))
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            if self.eat(b')') {
                return Ok(dims);
            }
            let start = self.pos;
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(Error::Format(format!("expected dimension at {}", self.pos)));
            }
            let digits = std::str::from_utf8(&self.s[start..self.pos]).expect("ascii digits");
            // numpy may write Python 2 long suffixes
            self.eat(b'L');
            dims.push(
                digits
                    .parse()
                    .map_err(|_| Error::Format(format!("dimension {digits} out of range")))?,
            );
            self.skip_ws();
            if !self.eat(b',') {
                self.skip_ws();
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn npy_bytes(dict: &str, payload: &[u8]) -> Vec<u8> {
        let mut header = dict.as_bytes().to_vec();
        let unpadded = 10 + header.len() + 1;
        let total = unpadded.div_ceil(64) * 64;
        header.resize(total - 10 - 1, b' ');
        header.push(b'\n');
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(payload);
        out
    }

    fn f32_payload(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn reads_float32_two_by_two() {
        let bytes = npy_bytes(
            "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 2), }",
            &f32_payload(&[1.0, 2.0, 3.0, 4.0]),
        );
        let m = read_matrix(&mut bytes.as_slice()).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 2));
        assert_eq!(m.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn float32_widening_is_exact() {
        let v = [0.1f32, -3.3e-7, 1.0e30];
        let bytes = npy_bytes(
            "{'descr': '<f4', 'fortran_order': False, 'shape': (3,), }",
            &f32_payload(&v),
        );
        let m = read_matrix(&mut bytes.as_slice()).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 3));
        for (a, b) in m.as_slice().iter().zip(v) {
            assert_eq!(*a, f64::from(b));
        }
    }

    #[test]
    fn empty_rows_are_accepted() {
        let bytes = npy_bytes("{'descr': '<f8', 'fortran_order': False, 'shape': (0, 4), }", &[]);
        let m = read_matrix(&mut bytes.as_slice()).unwrap();
        assert_eq!((m.rows(), m.cols()), (0, 4));
    }

    #[test]
    fn minimal_matrix_layout() {
        let m = Matrix::new(1, 1, vec![42.0]).unwrap();
        let mut out = Vec::new();
        write_matrix_to(&m, &mut out).unwrap();
        assert_eq!(out.len(), 128 + 8);
        assert_eq!(&out[..8], b"\x93NUMPY\x01\x00");
        assert_eq!(out[127], b'\n');
        assert_eq!(&out[128..], &42.0f64.to_le_bytes());
        let mut again = Vec::new();
        write_matrix_to(&m, &mut again).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn layout_errors() {
        let fortran = npy_bytes(
            "{'descr': '<f8', 'fortran_order': True, 'shape': (1, 1), }",
            &1.0f64.to_le_bytes(),
        );
        assert!(matches!(
            read_matrix(&mut fortran.as_slice()),
            Err(Error::UnsupportedLayout(_))
        ));
        let big = npy_bytes(
            "{'descr': '>f8', 'fortran_order': False, 'shape': (1, 1), }",
            &1.0f64.to_be_bytes(),
        );
        assert!(matches!(
            read_matrix(&mut big.as_slice()),
            Err(Error::UnsupportedLayout(_))
        ));
        let int = npy_bytes(
            "{'descr': '<i8', 'fortran_order': False, 'shape': (1, 1), }",
            &1i64.to_le_bytes(),
        );
        assert!(matches!(
            read_matrix(&mut int.as_slice()),
            Err(Error::UnsupportedLayout(_))
        ));
        let three_d = npy_bytes(
            "{'descr': '<f8', 'fortran_order': False, 'shape': (1, 1, 1), }",
            &1.0f64.to_le_bytes(),
        );
        assert!(matches!(
            read_matrix(&mut three_d.as_slice()),
            Err(Error::UnsupportedLayout(_))
        ));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(
            read_matrix(&mut &b"NOTNPY"[..]),
            Err(Error::Format(_))
        ));
        let missing = npy_bytes("{'descr': '<f8', 'shape': (1, 1), }", &1.0f64.to_le_bytes());
        assert!(matches!(
            read_matrix(&mut missing.as_slice()),
            Err(Error::Format(_))
        ));
        let short = npy_bytes("{'descr': '<f8', 'fortran_order': False, 'shape': (2, 2), }", &[0; 8]);
        assert!(matches!(
            read_matrix(&mut short.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn non_finite_reports_first_index() {
        let payload: Vec<u8> = [1.0f64, 2.0, f64::INFINITY, f64::NAN]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let bytes = npy_bytes(
            "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 2), }",
            &payload,
        );
        assert!(matches!(
            read_matrix(&mut bytes.as_slice()),
            Err(Error::NonFinite { index: 2, .. })
        ));
    }

    #[test]
    fn integer_labels() {
        let payload: Vec<u8> = [3i64, -1, 7].iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = npy_bytes(
            "{'descr': '<i8', 'fortran_order': False, 'shape': (3,), }",
            &payload,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.npy");
        fs::write(&path, bytes).unwrap();
        assert_eq!(load_labels(&path).unwrap(), vec![3, -1, 7]);
    }
}
