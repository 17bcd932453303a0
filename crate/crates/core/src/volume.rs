//! Volumetric scan containers and the `CTV1` binary file format.
//!
//! A `CTV1` file is a 16-byte header followed by voxel data:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CTV1"
//! 4       4     slices  (u32, little endian)
//! 8       4     rows    (u32, little endian)
//! 12      4     cols    (u32, little endian)
//! 16      4*N   voxels  (f32, little endian, row-major: slice, row, col)
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CTV_MAGIC: &[u8; 4] = b"CTV1";
pub const CTV_HEADER_LEN: usize = 16;

/// Dense 3D intensity array indexed `(slice, row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("zero-sized dimension in {dims:?}")));
        }
        let len = dims[0] * dims[1] * dims[2];
        if data.len() != len {
            return Err(Error::InvalidVolume(format!(
                "dims {dims:?} need {len} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn slices(&self) -> usize {
        self.dims[0]
    }

    pub fn slice_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    /// Keeps slices `start..end`.
    pub fn slice_range(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.dims[0] {
            return Err(Error::InvalidArgument(format!(
                "slice range {start}..{end} invalid for {} slices",
                self.dims[0]
            )));
        }
        let n = self.slice_len();
        Volume::new(
            [end - start, self.dims[1], self.dims[2]],
            self.data[start * n..end * n].to_vec(),
        )
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn write_ctv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(CTV_HEADER_LEN + 4 * self.data.len());
        buf.extend_from_slice(CTV_MAGIC);
        for d in self.dims {
            let d = u32::try_from(d).map_err(|_| Error::InvalidVolume(format!("dimension {d} exceeds u32")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_ctv(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ctv(&bytes).map_err(|m| Error::format(path, m))
    }

    pub fn decode_ctv(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < CTV_HEADER_LEN {
            return Err(format!("file too short for header ({} bytes)", bytes.len()));
        }
        if &bytes[0..4] != CTV_MAGIC {
            return Err("bad magic, expected CTV1".into());
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let dims = [dim(0), dim(1), dim(2)];
        let len = dims[0] * dims[1] * dims[2];
        let payload = &bytes[CTV_HEADER_LEN..];
        if payload.len() != 4 * len {
            return Err(format!("dims {dims:?} need {} payload bytes, found {}", 4 * len, payload.len()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Volume::new(dims, data).map_err(|e| e.to_string())
    }
}

/// Acquiring source of a scan (0..=3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SourceId(u8);

impl SourceId {
    pub const COUNT: usize = 4;
    pub const ALL: [SourceId; 4] = [SourceId(0), SourceId(1), SourceId(2), SourceId(3)];

    pub fn new(id: u8) -> Result<Self> {
        if (id as usize) < Self::COUNT {
            Ok(SourceId(id))
        } else {
            Err(Error::InvalidArgument(format!("source {id} outside 0..=3")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Binary class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    NonCovid = 0,
    Covid = 1,
}

impl Label {
    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::NonCovid),
            1 => Ok(Label::Covid),
            _ => Err(Error::InvalidArgument(format!("label {i} outside {{0,1}}"))),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// A raw scan plus its metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanVolume {
    pub voxels: Volume,
    pub scan_id: String,
    pub source: Option<SourceId>,
    pub label: Option<Label>,
    /// Non-fatal notes recorded by preprocessing steps.
    pub warnings: Vec<String>,
}

impl ScanVolume {
    pub fn new(
        scan_id: impl Into<String>,
        voxels: Volume,
        source: Option<SourceId>,
        label: Option<Label>,
    ) -> Result<Self> {
        let scan = Self {
            voxels,
            scan_id: scan_id.into(),
            source,
            label,
            warnings: Vec::new(),
        };
        scan.validate()?;
        Ok(scan)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.voxels.all_finite() {
            return Err(Error::NonFinite(format!("scan {} contains NaN/Inf", self.scan_id)));
        }
        Ok(())
    }

    pub fn with_voxels(&self, voxels: Volume) -> Self {
        Self {
            voxels,
            scan_id: self.scan_id.clone(),
            source: self.source,
            label: self.label,
            warnings: self.warnings.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ctv_header_layout() {
        let v = Volume::from_fn([2, 3, 4], |z, y, x| (z * 100 + y * 10 + x) as f32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ctv");
        v.write_ctv(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CTV1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 16 + 4 * 24);
        // voxel (0,1,2) is the 7th value
        let off = 16 + 4 * 6;
        assert_eq!(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), 12.0);
        assert_eq!(Volume::read_ctv(&path).unwrap(), v);
    }

    #[test]
    fn ctv_rejects_truncated_and_bad_magic() {
        assert!(Volume::decode_ctv(b"CTV").is_err());
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(Volume::decode_ctv(&bytes).is_err());
        let mut ok = b"CTV1".to_vec();
        ok.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        ok.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(Volume::decode_ctv(&ok).is_err());
    }

    #[test]
    fn scan_rejects_non_finite() {
        let v = Volume::new([1, 1, 2], vec![0.0, f32::NAN]).unwrap();
        assert!(ScanVolume::new("x", v, None, None).is_err());
    }
}
