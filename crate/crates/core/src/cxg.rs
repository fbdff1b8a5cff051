//! The `CXG1` tensor file format.
//!
//! Layout: magic `CXG1`, one dtype byte, one ndim byte, `ndim` little-endian
//! u64 dims, then the row-major payload. Complex values are stored as
//! interleaved little-endian f32 pairs.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CXG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    Complex64 = 0,
    Float32 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Complex64),
            1 => Ok(DType::Float32),
            2 => Ok(DType::U8),
            other => Err(Error::Format(format!("unknown CXG1 dtype code {other}"))),
        }
    }

    fn element_size(self) -> usize {
        match self {
            DType::Complex64 => 8,
            DType::Float32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Complex(Vec<Complex64>),
    Float(Vec<f32>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn complex(dims: Vec<usize>, data: Vec<Complex64>) -> Self {
        Self {
            dims,
            data: TensorData::Complex(data),
        }
    }

    pub fn float(dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            dims,
            data: TensorData::Float(data),
        }
    }

    pub fn bytes(dims: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            dims,
            data: TensorData::Bytes(data),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::Complex(_) => DType::Complex64,
            TensorData::Float(_) => DType::Float32,
            TensorData::Bytes(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::Complex(v) => v.len(),
            TensorData::Float(v) => v.len(),
            TensorData::Bytes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_complex(self) -> Result<(Vec<usize>, Vec<Complex64>)> {
        match self.data {
            TensorData::Complex(v) => Ok((self.dims, v)),
            _ => Err(Error::Format(format!(
                "expected complex64 tensor, found {:?}",
                self.dtype()
            ))),
        }
    }

    pub fn into_bytes(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self.data {
            TensorData::Bytes(v) => Ok((self.dims, v)),
            _ => Err(Error::Format(format!(
                "expected u8 tensor, found {:?}",
                self.dtype()
            ))),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::Format("too many dimensions".into()));
        }
        let expected: usize = self.dims.iter().product();
        if expected != self.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {expected} elements, payload has {}",
                self.dims,
                self.len()
            )));
        }
        w.write_all(MAGIC)?;
        w.write_all(&[self.dtype() as u8, self.dims.len() as u8])?;
        write_dims(&mut w, &self.dims)?;
        let mut buf = Vec::with_capacity(self.len() * self.dtype().element_size());
        match &self.data {
            TensorData::Complex(v) => {
                for z in v {
                    buf.extend_from_slice(&(z.re as f32).to_le_bytes());
                    buf.extend_from_slice(&(z.im as f32).to_le_bytes());
                }
            }
            TensorData::Float(v) => {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::Bytes(v) => buf.extend_from_slice(v),
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let dtype = DType::from_code(head[0])?;
        let dims = read_dims(&mut r, head[1] as usize)?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        let mut raw = vec![0u8; n * dtype.element_size()];
        r.read_exact(&mut raw)?;
        let f32_at = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let data = match dtype {
            DType::Complex64 => TensorData::Complex(
                raw.chunks_exact(8)
                    .map(|c| Complex64::new(f32_at(&c[..4]) as f64, f32_at(&c[4..]) as f64))
                    .collect(),
            ),
            DType::Float32 => TensorData::Float(raw.chunks_exact(4).map(f32_at).collect()),
            DType::U8 => TensorData::Bytes(raw),
        };
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

pub(crate) fn write_dims(w: &mut impl Write, dims: &[usize]) -> Result<()> {
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_dims(r: &mut impl Read, ndim: usize) -> Result<Vec<usize>> {
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let d = u64::from_le_bytes(b);
        dims.push(usize::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))?);
    }
    Ok(dims)
}
