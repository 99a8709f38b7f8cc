//! NPY v1.0 reader and writer for `f32`/`f64` C-order arrays.

use std::path::Path;

use ndarray::{Array, Array2, ArrayD, Dimension, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpyDtype {
    F32,
    F64,
}

impl NpyDtype {
    pub fn size(self) -> usize {
        match self {
            NpyDtype::F32 => 4,
            NpyDtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub dtype: NpyDtype,
    pub big_endian: bool,
    pub shape: Vec<usize>,
}

impl TensorHeader {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn payload_bytes(&self) -> usize {
        self.element_count() * self.dtype.size()
    }
}

#[derive(Debug, PartialEq)]
enum Value {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

/// Cursor over the Python-literal header dict.
struct Lexer<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> std::result::Result<(), String> {
        match self.peek() {
            Some(x) if x == c => {
                self.pos += 1;
                Ok(())
            }
            other => Err(format!(
                "expected '{}' at offset {}, found {:?}",
                c as char,
                self.pos,
                other.map(|b| b as char)
            )),
        }
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let quote = self.peek().ok_or("unexpected end of header")?;
        if quote != b'\'' && quote != b'"' {
            return Err(format!("expected string at offset {}", self.pos));
        }
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.s.len() {
            return Err("unterminated string in header".into());
        }
        let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(out)
    }

    fn ident(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.s[start..self.pos]).into_owned()
    }

    fn value(&mut self) -> std::result::Result<Value, String> {
        match self.peek().ok_or("unexpected end of header")? {
            b'\'' | b'"' => Ok(Value::Str(self.string()?)),
            b'(' => {
                self.pos += 1;
                let mut dims = Vec::new();
                loop {
                    if self.peek() == Some(b')') {
                        self.pos += 1;
                        break;
                    }
                    let tok = self.ident();
                    let tok = tok.strip_suffix('L').unwrap_or(&tok);
                    dims.push(
                        tok.parse::<usize>()
                            .map_err(|_| format!("bad dimension {tok:?}"))?,
                    );
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err("malformed shape tuple".into()),
                    }
                }
                Ok(Value::Tuple(dims))
            }
            _ => match self.ident().as_str() {
                "True" => Ok(Value::Bool(true)),
                "False" => Ok(Value::Bool(false)),
                other => Err(format!("unexpected token {other:?}")),
            },
        }
    }
}

fn parse_dict(text: &[u8]) -> std::result::Result<Vec<(String, Value)>, String> {
    let mut lx = Lexer { s: text, pos: 0 };
    lx.expect(b'{')?;
    let mut entries = Vec::new();
    loop {
        if lx.peek() == Some(b'}') {
            lx.pos += 1;
            break;
        }
        let key = lx.string()?;
        lx.expect(b':')?;
        entries.push((key, lx.value()?));
        match lx.peek() {
            Some(b',') => lx.pos += 1,
            Some(b'}') => {}
            _ => return Err("malformed header dict".into()),
        }
    }
    if lx.s[lx.pos..].iter().any(|b| !b.is_ascii_whitespace()) {
        return Err("trailing bytes after header dict".into());
    }
    Ok(entries)
}

/// Parses the magic, version and header dict. Returns the header and the
/// payload offset.
pub fn parse_header(bytes: &[u8], path: &Path) -> Result<(TensorHeader, usize)> {
    let err = |m: String| Error::parse(path, m);
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(err("not an NPY file (bad magic)".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(Error::Unsupported(format!(
            "{}: NPY version {major}.{minor} (only 1.0 is supported)",
            path.display()
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let end = 10 + header_len;
    if bytes.len() < end {
        return Err(err(format!(
            "header declares {header_len} bytes but file has {}",
            bytes.len() - 10
        )));
    }
    let entries = parse_dict(&bytes[10..end]).map_err(err)?;

    let (mut descr, mut fortran, mut shape) = (None, None, None);
    for (key, value) in entries {
        match (key.as_str(), value) {
            ("descr", Value::Str(s)) => descr = Some(s),
            ("fortran_order", Value::Bool(b)) => fortran = Some(b),
            ("shape", Value::Tuple(t)) => shape = Some(t),
            (k, v) => return Err(err(format!("unexpected header entry {k:?}: {v:?}"))),
        }
    }
    let descr = descr.ok_or_else(|| err("header lacks 'descr'".into()))?;
    let fortran = fortran.ok_or_else(|| err("header lacks 'fortran_order'".into()))?;
    let shape = shape.ok_or_else(|| err("header lacks 'shape'".into()))?;
    if fortran {
        return Err(Error::Unsupported(format!(
            "{}: fortran_order arrays are not supported; save in C order",
            path.display()
        )));
    }
    let (dtype, big_endian) = match descr.as_str() {
        "<f8" => (NpyDtype::F64, false),
        ">f8" => (NpyDtype::F64, true),
        "<f4" => (NpyDtype::F32, false),
        ">f4" => (NpyDtype::F32, true),
        d if d.contains('O') => {
            return Err(Error::Unsupported(format!(
                "{}: object arrays (pickled payloads) are rejected",
                path.display()
            )))
        }
        d => {
            return Err(Error::Unsupported(format!(
                "{}: dtype {d:?} (expected f4 or f8)",
                path.display()
            )))
        }
    };
    Ok((
        TensorHeader {
            dtype,
            big_endian,
            shape,
        },
        end,
    ))
}

pub fn decode_npy(bytes: &[u8], path: &Path) -> Result<(ArrayD<f64>, TensorHeader)> {
    let (header, offset) = parse_header(bytes, path)?;
    let payload = &bytes[offset..];
    let expected = header.payload_bytes();
    if payload.len() != expected {
        return Err(Error::parse(
            path,
            format!(
                "payload size mismatch: expected {expected} bytes for shape {:?}, found {}",
                header.shape,
                payload.len()
            ),
        ));
    }
    let size = header.dtype.size();
    let data: Vec<f64> = payload
        .chunks_exact(size)
        .map(|c| match (header.dtype, header.big_endian) {
            (NpyDtype::F64, false) => f64::from_le_bytes(c.try_into().unwrap()),
            (NpyDtype::F64, true) => f64::from_be_bytes(c.try_into().unwrap()),
            (NpyDtype::F32, false) => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            (NpyDtype::F32, true) => f32::from_be_bytes(c.try_into().unwrap()) as f64,
        })
        .collect();
    let array =
        ArrayD::from_shape_vec(IxDyn(&header.shape), data).map_err(|e| Error::parse(path, e.to_string()))?;
    Ok((array, header))
}

/// Little-endian `<f8` NPY v1.0 bytes for any array (logical C order).
pub fn encode_npy<D: Dimension>(array: &Array<f64, D>) -> Vec<u8> {
    let shape = match array.shape() {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    let unpadded = MAGIC.len() + 4 + dict.len() + 1;
    let padded = unpadded.div_ceil(ALIGN) * ALIGN;
    dict.extend(std::iter::repeat_n(' ', padded - unpadded));
    dict.push('\n');

    let mut out = Vec::with_capacity(padded + array.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<(ArrayD<f64>, TensorHeader)> {
    let path = path.as_ref();
    decode_npy(&super::read_file(path)?, path)
}

pub fn save_tensor(path: impl AsRef<Path>, array: &ArrayD<f64>) -> Result<()> {
    save_array(path, array)
}

pub fn save_array<D: Dimension>(path: impl AsRef<Path>, array: &Array<f64, D>) -> Result<()> {
    super::write_atomic(path.as_ref(), &encode_npy(array))
}

pub fn load_array<D: Dimension>(path: impl AsRef<Path>) -> Result<Array<f64, D>> {
    let path = path.as_ref();
    let (array, header) = load_tensor(path)?;
    array.into_dimensionality::<D>().map_err(|_| {
        Error::parse(
            path,
            format!(
                "expected a {}-D array, found shape {:?}",
                D::NDIM.map_or("n".to_string(), |n| n.to_string()),
                header.shape
            ),
        )
    })
}

pub fn load_array2(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    load_array(path)
}
