//! Minimal NPY v1.0 reader/writer.
//!
//! Only little-endian `<f4`, `<f8` and `<i4` payloads in C order are supported.
//! The header is padded with spaces and a trailing newline so that the payload
//! starts at a multiple of 64 bytes, which is what numpy itself writes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";
const PREAMBLE_LEN: usize = 10;
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "<f4")]
    F32,
    #[serde(rename = "<f8")]
    F64,
    #[serde(rename = "<i4")]
    I32,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
            Dtype::I32 => "<i4",
        }
    }

    fn from_descr(s: &str) -> Option<Self> {
        match s {
            "<f4" => Some(Dtype::F32),
            "<f8" => Some(Dtype::F64),
            "<i4" => Some(Dtype::I32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

/// A decoded tensor: shape plus a flat row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn dtype(&self) -> Dtype {
        match self.data {
            NpyData::F32(_) => Dtype::F32,
            NpyData::F64(_) => Dtype::F64,
            NpyData::I32(_) => Dtype::I32,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
            NpyData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Payload promoted to f64. Integer payloads are converted exactly.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            NpyData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            NpyData::F64(v) => v.clone(),
            NpyData::I32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

/// Renders the header dict exactly as numpy's `write_array` does for version 1.0.
fn header_bytes(dtype: Dtype, shape: &[usize]) -> Vec<u8> {
    let shape_str = match shape {
        [n] => format!("({n},)"),
        dims => {
            let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    };
    let dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape_str
    );
    // dict + padding + '\n' must end on a 64-byte boundary.
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    let mut header = dict.into_bytes();
    header.extend(std::iter::repeat_n(b' ', padding));
    header.push(b'\n');
    header
}

pub fn encode(array: &NpyArray) -> Vec<u8> {
    let header = header_bytes(array.dtype(), &array.shape);
    let header_len = u16::try_from(header.len()).expect("NPY v1.0 header exceeds 65535 bytes");
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + array.len() * array.dtype().size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    match &array.data {
        NpyData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn write(path: &Path, array: &NpyArray) -> Result<()> {
    let bytes = encode(array);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<NpyArray> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|(offset, reason)| Error::Format {
        path: path.to_path_buf(),
        offset,
        reason,
    })
}

type DecodeError = (u64, String);

/// Decodes a complete NPY buffer. Errors carry the byte offset of the problem.
pub fn decode(bytes: &[u8]) -> std::result::Result<NpyArray, DecodeError> {
    if bytes.len() < PREAMBLE_LEN {
        return Err((bytes.len() as u64, "file shorter than the 10-byte preamble".into()));
    }
    if bytes[..6] != MAGIC {
        return Err((0, "missing \\x93NUMPY magic".into()));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err((6, format!("unsupported version {}.{}", bytes[6], bytes[7])));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let payload_start = PREAMBLE_LEN + header_len;
    if bytes.len() < payload_start {
        return Err((8, format!("header length {header_len} runs past end of file")));
    }
    let header = std::str::from_utf8(&bytes[PREAMBLE_LEN..payload_start])
        .map_err(|e| ((PREAMBLE_LEN + e.valid_up_to()) as u64, "header is not ASCII".to_string()))?;
    let dict = parse_header(header).map_err(|(pos, msg)| ((PREAMBLE_LEN + pos) as u64, msg))?;

    let count: usize = dict.shape.iter().product();
    let size = dict.dtype.size();
    let expected = count
        .checked_mul(size)
        .ok_or((8, "shape overflows".to_string()))?;
    let payload = &bytes[payload_start..];
    if payload.len() != expected {
        return Err((
            payload_start as u64,
            format!(
                "payload is {} bytes but shape {:?} of {} needs {}",
                payload.len(),
                dict.shape,
                dict.dtype.descr(),
                expected
            ),
        ));
    }
    let data = match dict.dtype {
        Dtype::F32 => NpyData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::F64 => NpyData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I32 => NpyData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    };
    Ok(NpyArray {
        shape: dict.shape,
        data,
    })
}

struct HeaderDict {
    dtype: Dtype,
    shape: Vec<usize>,
}

/// Parses the python-literal header dict. Positions in errors are relative to
/// the start of the header string.
fn parse_header(header: &str) -> std::result::Result<HeaderDict, (usize, String)> {
    let mut p = Parser {
        src: header.as_bytes(),
        pos: 0,
    };
    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;

    p.skip_ws();
    p.expect(b'{')?;
    loop {
        p.skip_ws();
        if p.peek() == Some(b'}') {
            p.pos += 1;
            break;
        }
        let key_pos = p.pos;
        let key = p.string()?;
        p.skip_ws();
        p.expect(b':')?;
        p.skip_ws();
        match key.as_str() {
            "descr" => {
                let pos = p.pos;
                let s = p.string()?;
                descr = Some(
                    Dtype::from_descr(&s)
                        .ok_or((pos, format!("unsupported descr '{s}' (expected <f4, <f8 or <i4)")))?,
                );
            }
            "fortran_order" => fortran = Some(p.boolean()?),
            "shape" => shape = Some(p.tuple()?),
            other => return Err((key_pos, format!("unexpected header key '{other}'"))),
        }
        p.skip_ws();
        match p.peek() {
            Some(b',') => p.pos += 1,
            Some(b'}') => {}
            _ => return Err((p.pos, "expected ',' or '}' in header dict".into())),
        }
    }
    let rest = &header[p.pos..];
    if !rest.trim_end_matches(['\n', ' ', '\x00']).is_empty() {
        return Err((p.pos, "trailing bytes after header dict".into()));
    }
    let dtype = descr.ok_or((0, "header missing 'descr'".to_string()))?;
    let fortran = fortran.ok_or((0, "header missing 'fortran_order'".to_string()))?;
    if fortran {
        return Err((0, "fortran_order=True is not supported".into()));
    }
    let shape = shape.ok_or((0, "header missing 'shape'".to_string()))?;
    Ok(HeaderDict { dtype, shape })
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n')) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> std::result::Result<(), (usize, String)> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err((self.pos, format!("expected '{}'", c as char)))
        }
    }

    fn string(&mut self) -> std::result::Result<String, (usize, String)> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err((self.pos, "expected quoted string".into())),
        };
        let start = self.pos + 1;
        let len = self.src[start..]
            .iter()
            .position(|&b| b == quote)
            .ok_or((self.pos, "unterminated string".to_string()))?;
        self.pos = start + len + 1;
        Ok(String::from_utf8_lossy(&self.src[start..start + len]).into_owned())
    }

    fn boolean(&mut self) -> std::result::Result<bool, (usize, String)> {
        let rest = &self.src[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(true)
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(false)
        } else {
            Err((self.pos, "expected True or False".into()))
        }
    }

    fn tuple(&mut self) -> std::result::Result<Vec<usize>, (usize, String)> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(dims);
                }
                Some(b'0'..=b'9') => {
                    let start = self.pos;
                    while matches!(self.peek(), Some(b'0'..=b'9')) {
                        self.pos += 1;
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                    dims.push(text.parse().map_err(|_| (start, "dimension overflows".to_string()))?);
                    self.skip_ws();
                    if self.peek() == Some(b',') {
                        self.pos += 1;
                    }
                }
                _ => return Err((self.pos, "expected integer or ')' in shape".into())),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_payload_is_little_endian_f64() {
        let arr = NpyArray {
            shape: vec![2, 2],
            data: NpyData::F64(vec![1.0, 0.0, 0.0, 1.0]),
        };
        let bytes = encode(&arr);
        assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        let payload = &bytes[10 + header_len..];
        let mut expected = Vec::new();
        for v in [1.0f64, 0.0, 0.0, 1.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(payload, expected.as_slice());
    }

    #[test]
    fn header_matches_numpy_layout() {
        let bytes = encode(&NpyArray {
            shape: vec![3],
            data: NpyData::I32(vec![0, 1, 2]),
        });
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
        assert!(header.starts_with("{'descr': '<i4', 'fortran_order': False, 'shape': (3,), }"));
        assert!(header.ends_with('\n'));
    }

    #[test]
    fn parses_numpy_written_header_variants() {
        // numpy < 1.x wrote headers padded to 16 bytes; still valid v1.0.
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 1), }";
        let mut header = dict.as_bytes().to_vec();
        while (10 + header.len() + 1) % 16 != 0 {
            header.push(b' ');
        }
        header.push(b'\n');
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let arr = decode(&bytes).unwrap();
        assert_eq!(arr.shape, vec![2, 1]);
        assert_eq!(arr.data, NpyData::F32(vec![1.5, -2.0]));
    }

    #[test]
    fn rejects_bad_magic_and_fortran_order() {
        let mut bytes = encode(&NpyArray {
            shape: vec![1],
            data: NpyData::F64(vec![1.0]),
        });
        let good = bytes.clone();
        bytes[1] = b'X';
        assert_eq!(decode(&bytes).unwrap_err().0, 0);

        let mut fortran = good.clone();
        let pos = fortran.windows(5).position(|w| w == b"False").unwrap();
        fortran[pos..pos + 5].copy_from_slice(b"True ");
        assert!(decode(&fortran).unwrap_err().1.contains("fortran_order"));
    }

    #[test]
    fn rejects_unsupported_descr_with_offset() {
        let bytes = encode(&NpyArray {
            shape: vec![1],
            data: NpyData::F64(vec![1.0]),
        });
        let mut tampered = bytes.clone();
        let pos = tampered.windows(3).position(|w| w == b"<f8").unwrap();
        tampered[pos + 1] = b'c';
        let (offset, msg) = decode(&tampered).unwrap_err();
        assert_eq!(offset as usize, pos - 1);
        assert!(msg.contains("descr"));
    }

    #[test]
    fn truncated_payload_reports_payload_offset() {
        let bytes = encode(&NpyArray {
            shape: vec![4],
            data: NpyData::F32(vec![1.0, 2.0, 3.0, 4.0]),
        });
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as u64;
        let (offset, _) = decode(&bytes[..bytes.len() - 2]).unwrap_err();
        assert_eq!(offset, 10 + header_len);
        assert_eq!(offset % 64, 0);
    }

    #[test]
    fn encoding_is_byte_identical_to_numpy_save() {
        use sha2::{Digest, Sha256};
        // Digests of `np.save` output for np.eye(2), np.arange(3, dtype='<i4')
        // and np.arange(12, dtype='<f4').reshape(4, 3).
        let cases = [
            (
                NpyArray { shape: vec![2, 2], data: NpyData::F64(vec![1.0, 0.0, 0.0, 1.0]) },
                160,
                "4e3f508ec70cb18ad534621f8f4543515c3fe2f63c0498e6605566306371756e",
            ),
            (
                NpyArray { shape: vec![3], data: NpyData::I32(vec![0, 1, 2]) },
                140,
                "c8b16caa0f7bbe2bf06df66bd02f201f13a961ad617f011fe3a2e540cac89a62",
            ),
            (
                NpyArray { shape: vec![4, 3], data: NpyData::F32((0..12).map(|v| v as f32).collect()) },
                176,
                "feb2d899749032db220ab29dfcaa19770b8bcec2c165cf80d44c79ae946264bb",
            ),
        ];
        for (array, len, digest) in cases {
            let bytes = encode(&array);
            assert_eq!(bytes.len(), len);
            let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            assert_eq!(hex, digest);
        }
    }
}
