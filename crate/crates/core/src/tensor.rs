//! Dense rank-3 tensors (channels × rows × columns) and their binary container.
//!
//! Container layout (little-endian, no padding):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic (`SCNT` for tensors, `SCNK` for kernels) |
//! | 2     | u16 version = 1                         |
//! | 1     | u8 dtype (0 = f32, 1 = f64)             |
//! | 1     | u8 reserved = 0                         |
//! | 12    | u32 dims d0, d1, d2                     |
//! | ...   | d0·d1·d2 values, index = (i·d1 + j)·d2 + k |

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const TENSOR_MAGIC: [u8; 4] = *b"SCNT";
pub const KERNEL_MAGIC: [u8; 4] = *b"SCNK";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid dimensions {0}x{1}x{2}")]
    Dimension(usize, usize, usize),
    #[error("index ({i}, {j}, {k}) out of range for shape {shape:?}")]
    Index {
        i: usize,
        j: usize,
        k: usize,
        shape: (usize, usize, usize),
    },
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_err(offset: usize, msg: impl Into<String>) -> TensorError {
    TensorError::Format {
        offset,
        msg: msg.into(),
    }
}

/// Storage precision used when a tensor is written to disk.
/// Arithmetic is always carried out in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Precision::F32),
            1 => Some(Precision::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Checked element count for a C×H×W shape.
pub fn checked_len(c: usize, h: usize, w: usize) -> Result<usize, TensorError> {
    if c == 0 || h == 0 || w == 0 {
        return Err(TensorError::Dimension(c, h, w));
    }
    c.checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or(TensorError::Dimension(c, h, w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Result<Self, TensorError> {
        let len = checked_len(c, h, w)?;
        Ok(Self {
            c,
            h,
            w,
            data: vec![0.0; len],
            precision: Precision::F64,
        })
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        let len = checked_len(c, h, w)?;
        if data.len() != len {
            return Err(TensorError::Dimension(c, h, w));
        }
        Ok(Self {
            c,
            h,
            w,
            data,
            precision: Precision::F64,
        })
    }

    /// Builds a tensor by evaluating `f(i, j, k)` at every element.
    pub fn from_fn(
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, TensorError> {
        let mut t = Self::zeros(c, h, w)?;
        for i in 0..c {
            for j in 0..h {
                for k in 0..w {
                    t.data[(i * h + j) * w + k] = f(i, j, k);
                }
            }
        }
        Ok(t)
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn rows(&self) -> usize {
        self.h
    }

    pub fn cols(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.h + j) * self.w + k
    }

    fn check(&self, i: usize, j: usize, k: usize) -> Result<usize, TensorError> {
        if i < self.c && j < self.h && k < self.w {
            Ok(self.offset(i, j, k))
        } else {
            Err(TensorError::Index {
                i,
                j,
                k,
                shape: self.shape(),
            })
        }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Result<f64, TensorError> {
        self.check(i, j, k).map(|o| self.data[o])
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) -> Result<(), TensorError> {
        let o = self.check(i, j, k)?;
        self.data[o] = v;
        Ok(())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Row-major H×W plane of channel `i`.
    pub fn channel(&self, i: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(TENSOR_MAGIC, [self.c, self.h, self.w], self.precision, &self.data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let (dims, precision, data) = decode(TENSOR_MAGIC, bytes)?;
        Ok(Self::from_vec(dims[0], dims[1], dims[2], data)?.with_precision(precision))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Serializes a rank-3 payload into the container format.
pub fn encode(magic: [u8; 4], dims: [usize; 3], precision: Precision, data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * precision.width());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(precision.code());
    out.push(0);
    for d in dims {
        let d = u32::try_from(d).expect("dimension exceeds u32 range");
        out.extend_from_slice(&d.to_le_bytes());
    }
    match precision {
        Precision::F32 => {
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Parses a container, checking magic, version, dtype and payload length.
pub fn decode(
    magic: [u8; 4],
    bytes: &[u8],
) -> Result<([usize; 3], Precision, Vec<f64>), TensorError> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!("truncated header: need {HEADER_LEN} bytes"),
        ));
    }
    if bytes[0..4] != magic {
        return Err(format_err(
            0,
            format!(
                "bad magic {:02x?}, expected {:02x?}",
                &bytes[0..4],
                magic
            ),
        ));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let precision =
        Precision::from_code(bytes[6]).ok_or_else(|| format_err(6, format!("bad dtype {}", bytes[6])))?;
    if bytes[7] != 0 {
        return Err(format_err(7, "reserved byte must be zero"));
    }
    let mut dims = [0usize; 3];
    for (n, d) in dims.iter_mut().enumerate() {
        let o = 8 + 4 * n;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    let count = checked_len(dims[0], dims[1], dims[2])
        .map_err(|_| format_err(8, format!("invalid dimensions {dims:?}")))?;
    let payload = count
        .checked_mul(precision.width())
        .ok_or_else(|| format_err(8, "dimension overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != payload {
        let kind = if body.len() < payload {
            "truncated payload"
        } else {
            "trailing bytes after payload"
        };
        return Err(format_err(
            HEADER_LEN + body.len().min(payload),
            format!("{kind}: expected {payload} bytes, found {}", body.len()),
        ));
    }
    let data = match precision {
        Precision::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((dims, precision, data))
}
