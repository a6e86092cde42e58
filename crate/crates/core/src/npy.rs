//! Reading and writing the numpy `.npy` format.
//!
//! Versions 1.0 and 2.0 are read; 1.0 is written unless the header does not
//! fit a u16 length. Only little-endian `<f4`, `<f8` and `|u1` in C order are
//! supported. Fortran-order files are rejected rather than transposed.
//!
//! Format reference: <https://numpy.org/doc/stable/reference/generated/numpy.lib.format.html>

use crate::tensor::{DenseTensor, Dtype, TensorData, TensorError};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";

const ALIGN: usize = 64;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NpyError {
    #[error("missing \\x93NUMPY magic")]
    BadMagic,
    #[error("unsupported npy version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype descriptor {0:?}")]
    UnsupportedDtype(String),
    #[error("fortran_order arrays are not supported")]
    FortranOrderUnsupported,
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
}

impl NpyError {
    /// Stable identifier used in diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            NpyError::BadMagic => "BadMagic",
            NpyError::UnsupportedVersion(..) => "UnsupportedVersion",
            NpyError::MalformedHeader(_) => "MalformedHeader",
            NpyError::UnsupportedDtype(_) => "UnsupportedDtype",
            NpyError::FortranOrderUnsupported => "FortranOrderUnsupported",
            NpyError::TruncatedPayload { .. } => "TruncatedPayload",
            NpyError::TrailingBytes(_) => "TrailingBytes",
            NpyError::NonFiniteValue(_) => "NonFiniteValue",
            NpyError::InvalidShape(_) => "InvalidShape",
        }
    }
}

/// Parsed header dictionary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Offset of the first payload byte.
    pub data_offset: usize,
}

/// Parses only the preamble and header dictionary.
pub fn read_header(bytes: &[u8]) -> Result<NpyHeader, NpyError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let short =
        |n: usize| NpyError::MalformedHeader(format!("file ends inside preamble ({n} bytes)"));
    if bytes.len() < 8 {
        return Err(short(bytes.len()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (len_size, header_len) = match (major, minor) {
        (1, 0) => {
            let raw = bytes.get(8..10).ok_or_else(|| short(bytes.len()))?;
            (2, u16::from_le_bytes([raw[0], raw[1]]) as usize)
        }
        (2, 0) => {
            let raw = bytes.get(8..12).ok_or_else(|| short(bytes.len()))?;
            (
                4,
                u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as usize,
            )
        }
        _ => return Err(NpyError::UnsupportedVersion(major, minor)),
    };
    let start = 8 + len_size;
    let end = start + header_len;
    let raw = bytes
        .get(start..end)
        .ok_or_else(|| NpyError::MalformedHeader("header length exceeds file size".into()))?;
    let text = std::str::from_utf8(raw)
        .map_err(|_| NpyError::MalformedHeader("header is not ASCII".into()))?;
    let dict = HeaderDict::parse(text)?;
    Ok(NpyHeader {
        dtype: dict.dtype,
        shape: dict.shape,
        data_offset: end,
    })
}

/// Reads the preamble and header from a stream, leaving it positioned at the payload.
pub fn read_header_from<R: std::io::Read>(reader: &mut R) -> Result<NpyHeader, NpyError> {
    let mut buf = vec![0u8; 8];
    reader
        .read_exact(&mut buf)
        .map_err(|_| NpyError::BadMagic)?;
    if &buf[..MAGIC.len()] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let len_size = match (buf[6], buf[7]) {
        (1, 0) => 2,
        (2, 0) => 4,
        (major, minor) => return Err(NpyError::UnsupportedVersion(major, minor)),
    };
    let mut len_bytes = [0u8; 4];
    reader
        .read_exact(&mut len_bytes[..len_size])
        .map_err(|_| NpyError::MalformedHeader("file ends inside preamble".into()))?;
    buf.extend_from_slice(&len_bytes[..len_size]);
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let start = buf.len();
    buf.resize(start + header_len, 0);
    reader
        .read_exact(&mut buf[start..])
        .map_err(|_| NpyError::MalformedHeader("header length exceeds file size".into()))?;
    read_header(&buf)
}

/// Decodes a complete `.npy` file.
pub fn read_npy(bytes: &[u8]) -> Result<DenseTensor, NpyError> {
    let header = read_header(bytes)?;
    let numel: usize = header.shape.iter().product();
    let expected = numel * header.dtype.size();
    let payload = &bytes[header.data_offset..];
    if payload.len() < expected {
        return Err(NpyError::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(NpyError::TrailingBytes(payload.len() - expected));
    }
    let data = match header.dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 => TensorData::U8(payload.to_vec()),
    };
    DenseTensor::new(header.shape, data).map_err(|e| match e {
        TensorError::NonFinite(i) => NpyError::NonFiniteValue(i),
        TensorError::InvalidShape(s) => NpyError::InvalidShape(s),
        TensorError::LengthMismatch {
            expected, actual, ..
        } => NpyError::TruncatedPayload { expected, actual },
    })
}

/// Encodes a tensor. The preamble plus header is padded to a multiple of 64 bytes.
pub fn write_npy(t: &DenseTensor) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        t.dtype().descr(),
        shape_literal(t.shape())
    );
    // +1 for the terminating newline
    let unpadded_v1 = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let (version, len_size) = if unpadded_v1.next_multiple_of(ALIGN) - 10 <= u16::MAX as usize {
        (1u8, 2usize)
    } else {
        (2u8, 4usize)
    };
    let preamble = MAGIC.len() + 2 + len_size;
    let total = (preamble + dict.len() + 1).next_multiple_of(ALIGN);
    let header_len = total - preamble;

    let mut out = Vec::with_capacity(total + t.numel() * t.dtype().size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[version, 0]);
    if version == 1 {
        out.extend_from_slice(&(header_len as u16).to_le_bytes());
    } else {
        out.extend_from_slice(&(header_len as u32).to_le_bytes());
    }
    out.extend_from_slice(dict.as_bytes());
    out.resize(total - 1, b' ');
    out.push(b'\n');

    match t.data() {
        TensorData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    out
}

fn shape_literal(shape: &[usize]) -> String {
    match shape {
        [d] => format!("({d},)"),
        _ => {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            format!("({})", dims.join(", "))
        }
    }
}

struct HeaderDict {
    dtype: Dtype,
    shape: Vec<usize>,
}

#[derive(Debug)]
enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self, NpyError> {
        let mut p = LiteralParser {
            s: text.as_bytes(),
            pos: 0,
        };
        let entries = p.dict()?;
        let mut descr = None;
        let mut fortran = None;
        let mut shape = None;
        for (key, value) in entries {
            match (key.as_str(), value) {
                ("descr", Literal::Str(s)) => descr = Some(s),
                ("fortran_order", Literal::Bool(b)) => fortran = Some(b),
                ("shape", Literal::Tuple(t)) => shape = Some(t),
                (k @ ("descr" | "fortran_order" | "shape"), v) => {
                    return Err(NpyError::MalformedHeader(format!(
                        "bad value for {k}: {v:?}"
                    )))
                }
                // unknown keys are tolerated
                _ => {}
            }
        }
        let missing = |k: &str| NpyError::MalformedHeader(format!("missing key {k:?}"));
        let descr = descr.ok_or_else(|| missing("descr"))?;
        let fortran = fortran.ok_or_else(|| missing("fortran_order"))?;
        let shape = shape.ok_or_else(|| missing("shape"))?;

        let dtype = match descr.as_str() {
            "<f4" => Dtype::F32,
            "<f8" => Dtype::F64,
            "|u1" => Dtype::U8,
            _ => return Err(NpyError::UnsupportedDtype(descr)),
        };
        if fortran {
            return Err(NpyError::FortranOrderUnsupported);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(NpyError::InvalidShape(shape));
        }
        Ok(Self { dtype, shape })
    }
}

/// Just enough of a Python literal parser for npy header dictionaries.
struct LiteralParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl LiteralParser<'_> {
    fn err(&self, what: &str) -> NpyError {
        NpyError::MalformedHeader(format!("{what} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), NpyError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn dict(&mut self) -> Result<Vec<(String, Literal)>, NpyError> {
        self.expect(b'{')?;
        let mut out = Vec::new();
        loop {
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            let value = self.value()?;
            out.push((key, value));
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(self.err("expected ',' or '}'")),
            }
        }
        if self.peek().is_some() {
            return Err(self.err("trailing characters after dictionary"));
        }
        Ok(out)
    }

    fn string(&mut self) -> Result<String, NpyError> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.s.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn value(&mut self) -> Result<Literal, NpyError> {
        match self.peek() {
            Some(b'\'' | b'"') => self.string().map(Literal::Str),
            Some(b'(') => self.tuple().map(Literal::Tuple),
            Some(b'T') if self.s[self.pos..].starts_with(b"True") => {
                self.pos += 4;
                Ok(Literal::Bool(true))
            }
            Some(b'F') if self.s[self.pos..].starts_with(b"False") => {
                self.pos += 5;
                Ok(Literal::Bool(false))
            }
            _ => Err(self.err("unsupported value")),
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>, NpyError> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(dims);
                }
                Some(c) if c.is_ascii_digit() => {
                    let start = self.pos;
                    while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                    // digits only, so utf8 is guaranteed
                    let text = std::str::from_utf8(&self.s[start..self.pos]).unwrap();
                    // numpy may write 2L on very old files
                    if self.s.get(self.pos) == Some(&b'L') {
                        self.pos += 1;
                    }
                    dims.push(text.parse().map_err(|_| self.err("dimension overflow"))?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err(self.err("expected ',' or ')' in shape")),
                    }
                }
                _ => return Err(self.err("expected dimension")),
            }
        }
    }
}
