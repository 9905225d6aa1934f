//! STDF: binary container for (N, T, C, H, W) float sequences.
//!
//! Layout, all little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `STDF` |
//! | 4 | version (u32, currently 1) |
//! | 20 | N, T, C, H, W (u32 each) |
//! | 4 | dtype tag (0 = f32, 1 = f64) |
//! | N·T·C·H·W·size | payload, row-major |
//! | 24·C | per channel: mean f64, std f64, flags u32, reserved u32 |
//!
//! Flag bit 0 marks a zero-variance channel whose std was replaced by 1;
//! bit 1 marks the payload as normalized with these statistics.

use std::path::Path;

use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const STDF_MAGIC: [u8; 4] = *b"STDF";
pub const STDF_VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 32;
pub const STATS_BYTES: u64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn of<T: Scalar>() -> Self {
        if std::mem::size_of::<T>() == 4 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn tag(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
    /// The channel had zero variance and `std` was set to 1.
    pub std_fallback: bool,
    pub normalized: bool,
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats {
        mean: 0.0,
        std: 1.0,
        std_fallback: false,
        normalized: false,
    };

    fn flags(&self) -> u32 {
        self.std_fallback as u32 | (self.normalized as u32) << 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StdfDataset<T> {
    /// (N, T, C, H, W)
    pub data: Tensor<T>,
    pub stats: Vec<ChannelStats>,
    pub dtype: Dtype,
}

impl<T: Scalar> StdfDataset<T> {
    pub fn new(data: Tensor<T>, stats: Vec<ChannelStats>) -> Result<Self> {
        if data.rank() != 5 {
            return Err(Error::Shape(format!("dataset must be (N,T,C,H,W), got {:?}", data.shape())));
        }
        if stats.len() != data.shape()[2] {
            return Err(Error::Shape(format!(
                "{} channel stats for {} channels",
                stats.len(),
                data.shape()[2]
            )));
        }
        Ok(Self {
            data,
            stats,
            dtype: Dtype::of::<T>(),
        })
    }

    pub fn dims(&self) -> [usize; 5] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3], s[4]]
    }

    pub fn samples(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    /// Sample `i` as (1, T, C, H, W).
    pub fn sample(&self, i: usize) -> Result<Tensor<T>> {
        self.data.narrow(0, i, 1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(HEADER_BYTES as usize + self.data.len() * self.dtype.size());
        out.extend_from_slice(&STDF_MAGIC);
        binio::put_u32(&mut out, STDF_VERSION);
        for d in dims {
            let d = u32::try_from(d).map_err(|_| Error::Config(format!("extent {d} exceeds u32")))?;
            binio::put_u32(&mut out, d);
        }
        binio::put_u32(&mut out, self.dtype.tag());
        match self.dtype {
            Dtype::F32 => self
                .data
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes())),
            Dtype::F64 => self
                .data
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.as_f64().to_le_bytes())),
        }
        for s in &self.stats {
            binio::put_f64(&mut out, s.mean);
            binio::put_f64(&mut out, s.std);
            binio::put_u32(&mut out, s.flags());
            binio::put_u32(&mut out, 0);
        }
        Ok(out)
    }

    /// Parse a file image; values are converted to `T` if the stored dtype
    /// differs.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(STDF_MAGIC)?;
        let version = r.u32()?;
        if version != STDF_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                supported: STDF_VERSION,
            });
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let dtype = match r.u32()? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(r.format_error(format!("unknown dtype tag {other}"))),
        };
        let count = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let expected = count
            .and_then(|c| c.checked_mul(dtype.size() as u64))
            .and_then(|p| p.checked_add(HEADER_BYTES + STATS_BYTES * dims[2] as u64))
            .ok_or_else(|| r.format_error(format!("header extents {dims:?} overflow")))?;
        if expected != bytes.len() as u64 {
            return Err(Error::Length {
                path: path.to_path_buf(),
                expected,
                found: bytes.len() as u64,
            });
        }
        let n = count.expect("checked above") as usize;
        let raw = r.take(n * dtype.size())?;
        let data: Vec<T> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        let mut stats = Vec::with_capacity(dims[2]);
        for _ in 0..dims[2] {
            let mean = r.f64()?;
            let std = r.f64()?;
            let flags = r.u32()?;
            let _reserved = r.u32()?;
            if flags > 3 {
                return Err(r.format_error(format!("unknown stats flags {flags:#x}")));
            }
            stats.push(ChannelStats {
                mean,
                std,
                std_fallback: flags & 1 != 0,
                normalized: flags & 2 != 0,
            });
        }
        let mut ds = Self::new(Tensor::new(&dims, data)?, stats)?;
        ds.dtype = dtype;
        Ok(ds)
    }
}

pub fn write_stdf<T: Scalar>(path: &Path, dataset: &StdfDataset<T>) -> Result<()> {
    binio::write_file(path, &dataset.to_bytes()?)
}

pub fn read_stdf<T: Scalar>(path: &Path) -> Result<StdfDataset<T>> {
    let bytes = binio::read_file(path)?;
    StdfDataset::from_bytes(&bytes, path)
}
