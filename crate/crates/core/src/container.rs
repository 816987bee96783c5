//! The ULSA binary tensor container.
//!
//! Layout (little-endian):
//!
//! | field   | size            | value                         |
//! |---------|-----------------|-------------------------------|
//! | magic   | 4 bytes         | `b"ULSA"`                     |
//! | version | u8              | 1                             |
//! | dtype   | u8              | 0 = float32, 1 = uint8        |
//! | ndim    | u8              | number of dimensions          |
//! | dims    | ndim x u32      | row-major shape               |
//! | payload | prod(dims) x sz | row-major element data        |
//!
//! Frame sequences are stored as `[T, n_ax, n_lat]` (2D) or
//! `[T, n_ax, n_el, n_lat]` (3D) with intensities mapped from the internal
//! `[-1, 1]` range to `[0, 1]`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ULSA";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    U8 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::U8(_) => DType::U8,
        }
    }
}

/// An n-dimensional tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    dims: Vec<usize>,
    payload: Payload,
}

impl Container {
    pub fn new(dims: Vec<usize>, payload: Payload) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::invalid(format!("too many dimensions: {}", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::invalid("dimension exceeds u32 range"));
        }
        let n: usize = dims.iter().product();
        if n != payload.len() {
            return Err(Error::invalid(format!(
                "payload has {} elements, dims {:?} require {}",
                payload.len(),
                dims,
                n
            )));
        }
        Ok(Self { dims, payload })
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, Payload::F32(data))
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, Payload::U8(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn into_payload(self) -> Payload {
        self.payload
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.payload {
            Payload::F32(v) => Some(v),
            Payload::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.payload {
            Payload::U8(v) => Some(v),
            Payload::F32(_) => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.payload.dtype() as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let header = take(&mut cur, 7)?;
        if &header[..4] != MAGIC {
            return Err(Error::Format("bad magic, expected \"ULSA\"".into()));
        }
        if header[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", header[4])));
        }
        let dtype = match header[5] {
            0 => DType::F32,
            1 => DType::U8,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        let ndim = header[6] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let b = take(&mut cur, 4)?;
            dims.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dims overflow".into()))?;
        let payload = match dtype {
            DType::F32 => {
                let raw = take(&mut cur, n.checked_mul(4).ok_or_else(|| Error::Format("dims overflow".into()))?)?;
                Payload::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            DType::U8 => Payload::U8(take(&mut cur, n)?.to_vec()),
        };
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", cur.len())));
        }
        Ok(Self { dims, payload })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::Format(format!("read failed: {e}")))?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Format(format!(
            "truncated: needed {n} bytes, {} left",
            cur.len()
        )));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}
