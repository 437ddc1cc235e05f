//! `MTPE` embedding files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MTPE"
//!      4     2  format version (u16, currently 1)
//!      6     2  dtype code (u16: 1 = f32, 2 = f64)
//!      8     4  rows (u32)
//!     12     4  cols (u32)
//!     16     …  rows × cols values, row-major
//! ```
//! All integers and values are little-endian.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Scalar};

pub const MAGIC: &[u8; 4] = b"MTPE";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u16 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u16) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingHeader {
    pub version: u16,
    pub dtype: DType,
    pub rows: usize,
    pub cols: usize,
}

impl EmbeddingHeader {
    pub fn payload_len(&self) -> usize {
        self.rows * self.cols * self.dtype.size()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// A decoded embedding, keeping the dtype it was stored with.
#[derive(Clone, Debug, PartialEq)]
pub enum Embedding {
    F32(FeatureMatrix<f32>),
    F64(FeatureMatrix<f64>),
}

impl Embedding {
    pub fn dtype(&self) -> DType {
        match self {
            Embedding::F32(_) => DType::F32,
            Embedding::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Embedding::F32(m) => m.shape(),
            Embedding::F64(m) => m.shape(),
        }
    }

    /// Converts to the requested element type (exact when widening).
    pub fn into_matrix<T: Scalar>(self) -> FeatureMatrix<T> {
        match self {
            Embedding::F32(m) => m.cast(),
            Embedding::F64(m) => m.cast(),
        }
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses a header at the start of `bytes`. `base` is added to reported
/// offsets when the header sits inside a larger container.
pub fn parse_header(bytes: &[u8], base: usize) -> Result<EmbeddingHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            base + bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(base, format!("bad magic {:?}", &bytes[0..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != FORMAT_VERSION {
        return Err(format_err(base + 4, format!("unsupported version {version}")));
    }
    let code = u16_at(6);
    let dtype = DType::from_code(code)
        .ok_or_else(|| format_err(base + 6, format!("unknown dtype code {code}")))?;
    Ok(EmbeddingHeader {
        version,
        dtype,
        rows: u32_at(8) as usize,
        cols: u32_at(12) as usize,
    })
}

pub fn encode<T: Scalar>(matrix: &FeatureMatrix<T>) -> Result<Vec<u8>> {
    let rows = u32::try_from(matrix.rows())
        .map_err(|_| Error::Contract(format!("{} rows exceed u32", matrix.rows())))?;
    let cols = u32::try_from(matrix.cols())
        .map_err(|_| Error::Contract(format!("{} cols exceed u32", matrix.cols())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE_CODE.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for &v in matrix.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn decode_payload<T: Scalar>(h: &EmbeddingHeader, payload: &[u8]) -> FeatureMatrix<T> {
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    FeatureMatrix::from_vec(h.rows, h.cols, data).expect("payload length checked")
}

/// Decodes one embedding from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8], base: usize) -> Result<(Embedding, usize)> {
    let header = parse_header(bytes, base)?;
    let need = header.payload_len();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < need {
        return Err(format_err(
            base + bytes.len(),
            format!(
                "truncated payload: {} of {need} bytes for {}x{} {:?}",
                payload.len(),
                header.rows,
                header.cols,
                header.dtype
            ),
        ));
    }
    let payload = &payload[..need];
    let emb = match header.dtype {
        DType::F32 => Embedding::F32(decode_payload(&header, payload)),
        DType::F64 => Embedding::F64(decode_payload(&header, payload)),
    };
    Ok((emb, HEADER_LEN + need))
}

/// Decodes a complete file image; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Embedding> {
    let (emb, used) = decode_prefix(bytes, 0)?;
    if used != bytes.len() {
        return Err(format_err(
            used,
            format!("{} trailing bytes after payload", bytes.len() - used),
        ));
    }
    Ok(emb)
}

pub fn save_embedding<T: Scalar>(matrix: &FeatureMatrix<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(matrix)?).map_err(|e| Error::io(path, e))
}

pub fn load_embedding(path: impl AsRef<Path>) -> Result<Embedding> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| with_path(e, path))
}

/// Reads and validates only the header, checking the file length against it.
pub fn read_header(path: impl AsRef<Path>) -> Result<EmbeddingHeader> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    file.by_ref()
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    let header = parse_header(&buf, 0).map_err(|e| with_path(e, path))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let expect = HEADER_LEN + header.payload_len();
    if len != expect {
        return Err(with_path(
            format_err(len.min(expect), format!("file is {len} bytes, header implies {expect}")),
            path,
        ));
    }
    Ok(header)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}
