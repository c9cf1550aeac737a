//! Dense f32 tensors and the `MMST` binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4     magic "MMST"
//! 4        version (1)
//! 5        dtype (0 = f32)
//! 6..8     ndim (u16)
//! 8..      ndim x u32 dims
//! ..       row-major f32 payload
//! ..+8     checksum: u64 sum of payload bytes, wrapping
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMST";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

/// Row-major f32 tensor with explicit dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("tensor needs at least one dimension".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} imply {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = dims.iter().product();
        Tensor::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn from_array2(a: &Array2<f32>) -> Result<Self> {
        let (r, c) = a.dim();
        Tensor::new(vec![r, c], a.iter().copied().collect())
    }

    pub fn from_array1(a: &Array1<f32>) -> Result<Self> {
        Tensor::new(vec![a.len()], a.to_vec())
    }

    pub fn to_array2(&self) -> Result<Array2<f32>> {
        if self.dims.len() != 2 {
            return Err(Error::Shape(format!("expected 2-D tensor, got dims {:?}", self.dims)));
        }
        Ok(Array2::from_shape_vec((self.dims[0], self.dims[1]), self.data.clone())
            .expect("dims validated at construction"))
    }

    pub fn to_arrayd(&self) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(&self.dims), self.data.clone()).expect("dims validated at construction")
    }

    /// Serializes into the `MMST` byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.is_finite() {
            return Err(Error::Validation("refusing to write non-finite tensor payload".into()));
        }
        let ndim = u16::try_from(self.dims.len())
            .map_err(|_| Error::Shape(format!("{} dimensions exceed u16", self.dims.len())))?;
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len() + 8);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F32);
        out.extend_from_slice(&ndim.to_le_bytes());
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        let payload_start = out.len();
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = checksum(&out[payload_start..]);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    /// Parses the `MMST` byte layout, validating header, length and checksum.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
        }
        let ndim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        if ndim == 0 {
            return Err(Error::Format("ndim is zero".into()));
        }
        let dims_end = 8 + 4 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::Format("truncated dimension table".into()));
        }
        let dims: Vec<usize> = bytes[8..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if dims.contains(&0) {
            return Err(Error::Format(format!("zero-sized dimension in {dims:?}")));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let payload_end = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(dims_end))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        if bytes.len() != payload_end + 8 {
            return Err(Error::Format(format!(
                "expected {} bytes for dims {dims:?}, found {}",
                payload_end + 8,
                bytes.len()
            )));
        }
        let payload = &bytes[dims_end..payload_end];
        let stored = u64::from_le_bytes(bytes[payload_end..].try_into().unwrap());
        let actual = checksum(payload);
        if stored != actual {
            return Err(Error::Format(format!("checksum mismatch: stored {stored}, computed {actual}")));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor { dims, data };
        if !t.is_finite() {
            return Err(Error::Validation("tensor payload contains non-finite values".into()));
        }
        Ok(t)
    }
}

fn checksum(payload: &[u8]) -> u64 {
    payload.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.to_bytes()?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
