//! Access to prepared scan views and their pooled model inputs.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sourceaware_nn::Tensor;

use crate::error::{Error, Result};
use crate::manifest::{volume_path, Manifest, ManifestRow};
use crate::prep::{
    adaptive_avg_pool2d, adaptive_avg_pool3d, canonicalize_2d, canonicalize_3d, prepare_view, PrepConfig, ScanView,
};
use crate::volume::{Label, ScanVolume, SourceId, Volume};

/// A scan reference with its known labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledScan {
    pub scan_id: String,
    pub label: Label,
    pub source: Option<SourceId>,
}

/// Which canonical shape a slice model reads its slices from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceResolution {
    /// 24 slices of 448x448.
    Res24x448,
    /// 128 slices of 256x256.
    Res128x256,
}

impl SliceResolution {
    pub fn slices(self) -> usize {
        match self {
            SliceResolution::Res24x448 => 24,
            SliceResolution::Res128x256 => 128,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SliceResolution::Res24x448 => "24x448x448",
            SliceResolution::Res128x256 => "128x256x256",
        }
    }
}

/// Source of prepared (trimmed, optionally lung-cropped) scan views.
///
/// The pooled accessors have default implementations that canonicalize on
/// every call; stores may cache them since the computation is deterministic.
pub trait ViewStore {
    fn prepared(&self, scan_id: &str, view: ScanView) -> Result<ScanVolume>;

    /// Canonical 3D volume average-pooled to `dims`.
    fn stem3d(&self, scan_id: &str, view: ScanView, dims: [usize; 3]) -> Result<Volume> {
        let c = canonicalize_3d(&self.prepared(scan_id, view)?)?;
        Ok(adaptive_avg_pool3d(c.volume(), dims))
    }

    /// Canonical slices, each average-pooled to `grid x grid`.
    fn stem2d(&self, scan_id: &str, view: ScanView, res: SliceResolution, grid: usize) -> Result<Volume> {
        stem2d_uncached(&self.prepared(scan_id, view)?, res, grid)
    }
}

pub fn pool_slices(v: &Volume, grid: usize) -> Volume {
    let [s, h, w] = v.dims();
    let mut data = Vec::with_capacity(s * grid * grid);
    for z in 0..s {
        data.extend(adaptive_avg_pool2d(v.slice(z), h, w, grid, grid));
    }
    Volume::new([s, grid, grid], data).expect("pooled dims")
}

type CacheKey = (String, ScanView, String);

/// Prepared views held in memory, with memoized pooled inputs.
#[derive(Default)]
pub struct MemoryViewStore {
    views: HashMap<(String, ScanView), ScanVolume>,
    cache: RefCell<HashMap<CacheKey, Volume>>,
}

impl MemoryViewStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Prepares every requested view of every scan.
    pub fn from_raw(scans: &[ScanVolume], views: &[ScanView], cfg: &PrepConfig) -> Result<Self> {
        let mut store = Self::new();
        for scan in scans {
            for &view in views {
                store.insert(view, prepare_view(scan, view, cfg)?);
            }
        }
        Ok(store)
    }

    pub fn insert(&mut self, view: ScanView, scan: ScanVolume) {
        self.views.insert((scan.scan_id.clone(), view), scan);
    }

    fn cached(&self, key: CacheKey, f: impl FnOnce() -> Result<Volume>) -> Result<Volume> {
        if let Some(v) = self.cache.borrow().get(&key) {
            return Ok(v.clone());
        }
        let v = f()?;
        self.cache.borrow_mut().insert(key, v.clone());
        Ok(v)
    }
}

impl ViewStore for MemoryViewStore {
    fn prepared(&self, scan_id: &str, view: ScanView) -> Result<ScanVolume> {
        self.views
            .get(&(scan_id.to_string(), view))
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no {} view for scan {scan_id}", view.as_str())))
    }

    fn stem3d(&self, scan_id: &str, view: ScanView, dims: [usize; 3]) -> Result<Volume> {
        self.cached((scan_id.into(), view, StemKind::Volume(dims).key()), || {
            let c = canonicalize_3d(&self.prepared(scan_id, view)?)?;
            Ok(adaptive_avg_pool3d(c.volume(), dims))
        })
    }

    fn stem2d(&self, scan_id: &str, view: ScanView, res: SliceResolution, grid: usize) -> Result<Volume> {
        self.cached((scan_id.into(), view, StemKind::Slices(res, grid).key()), || {
            stem2d_uncached(&self.prepared(scan_id, view)?, res, grid)
        })
    }
}

/// Views computed on demand from the volumes of a manifest. Pooled inputs
/// are read from `stem_dir` when present and memoized.
pub struct DiskViewStore {
    manifest_path: PathBuf,
    rows: HashMap<String, ManifestRow>,
    prep: PrepConfig,
    stem_dir: PathBuf,
    cache: RefCell<HashMap<CacheKey, Volume>>,
}

impl DiskViewStore {
    pub fn new(manifest_path: &Path, manifest: &Manifest, prep: PrepConfig, stem_dir: &Path) -> Self {
        Self {
            manifest_path: manifest_path.to_path_buf(),
            rows: manifest.rows.iter().map(|r| (r.scan_id.clone(), r.clone())).collect(),
            prep,
            stem_dir: stem_dir.to_path_buf(),
            cache: RefCell::default(),
        }
    }

    pub fn stem_path(&self, scan_id: &str, view: ScanView, key: &str) -> PathBuf {
        self.stem_dir.join(scan_id).join(format!("{}_{key}.ctv", view.as_str()))
    }

    fn stem(&self, scan_id: &str, view: ScanView, key: String, f: impl FnOnce() -> Result<Volume>) -> Result<Volume> {
        let ck = (scan_id.to_string(), view, key);
        if let Some(v) = self.cache.borrow().get(&ck) {
            return Ok(v.clone());
        }
        let path = self.stem_path(scan_id, view, &ck.2);
        let v = if path.exists() { Volume::read_ctv(&path)? } else { f()? };
        self.cache.borrow_mut().insert(ck, v.clone());
        Ok(v)
    }

    /// Computes a pooled input and writes it under the stem directory.
    pub fn materialize(&self, scan_id: &str, view: ScanView, input: StemKind) -> Result<()> {
        let key = input.key();
        let v = match input {
            StemKind::Volume(dims) => {
                let c = canonicalize_3d(&self.prepared(scan_id, view)?)?;
                adaptive_avg_pool3d(c.volume(), dims)
            }
            StemKind::Slices(res, grid) => stem2d_uncached(&self.prepared(scan_id, view)?, res, grid)?,
        };
        v.write_ctv(&self.stem_path(scan_id, view, &key))
    }
}

/// A pooled model input kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StemKind {
    Volume([usize; 3]),
    Slices(SliceResolution, usize),
}

impl StemKind {
    fn key(self) -> String {
        match self {
            StemKind::Volume([d, h, w]) => format!("3d_{d}x{h}x{w}"),
            StemKind::Slices(res, grid) => format!("2d_{}_{grid}", res.as_str()),
        }
    }
}

fn stem2d_uncached(scan: &ScanVolume, res: SliceResolution, grid: usize) -> Result<Volume> {
    Ok(match res {
        SliceResolution::Res24x448 => pool_slices(canonicalize_2d(scan)?.volume(), grid),
        SliceResolution::Res128x256 => pool_slices(canonicalize_3d(scan)?.volume(), grid),
    })
}

impl ViewStore for DiskViewStore {
    fn prepared(&self, scan_id: &str, view: ScanView) -> Result<ScanVolume> {
        let row = self
            .rows
            .get(scan_id)
            .ok_or_else(|| Error::InvalidArgument(format!("scan {scan_id} is not in the manifest")))?;
        let voxels = Volume::read_ctv(&volume_path(&self.manifest_path, row))?;
        let scan = ScanVolume::new(scan_id, voxels, row.source, row.label)?;
        prepare_view(&scan, view, &self.prep)
    }

    fn stem3d(&self, scan_id: &str, view: ScanView, dims: [usize; 3]) -> Result<Volume> {
        self.stem(scan_id, view, StemKind::Volume(dims).key(), || {
            let c = canonicalize_3d(&self.prepared(scan_id, view)?)?;
            Ok(adaptive_avg_pool3d(c.volume(), dims))
        })
    }

    fn stem2d(&self, scan_id: &str, view: ScanView, res: SliceResolution, grid: usize) -> Result<Volume> {
        self.stem(scan_id, view, StemKind::Slices(res, grid).key(), || {
            stem2d_uncached(&self.prepared(scan_id, view)?, res, grid)
        })
    }
}

/// Maps `[0, 1]` intensities to `[-1, 1]` as a `[1, D, H, W]` tensor.
pub fn volume_input(v: &Volume) -> Tensor {
    let [d, h, w] = v.dims();
    let data = v.data().iter().map(|&x| 2.0 * f64::from(x) - 1.0).collect();
    Tensor::from_vec(&[1, d, h, w], data).expect("volume dims")
}

/// Splits a `grid x grid` plane into non-overlapping `patch x patch` tokens,
/// row-major, scaled to `[-1, 1]`. Returns `[tokens, patch * patch]`.
pub fn patch_tokens(plane: &[f32], grid: usize, patch: usize) -> Result<Tensor> {
    if plane.len() != grid * grid || patch == 0 || grid % patch != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("{grid}x{grid} plane divisible by patch {patch}"),
            got: format!("{} values", plane.len()),
        });
    }
    let per = grid / patch;
    let mut data = Vec::with_capacity(grid * grid);
    for py in 0..per {
        for px in 0..per {
            for y in 0..patch {
                for x in 0..patch {
                    let v = plane[(py * patch + y) * grid + px * patch + x];
                    data.push(2.0 * f64::from(v) - 1.0);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[per * per, patch * patch], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_order_is_row_major() {
        let plane: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
        let t = patch_tokens(&plane, 4, 2).unwrap();
        assert_eq!(t.shape(), &[4, 4]);
        // second token is the top-right 2x2 patch: values 2,3,6,7
        let expect: Vec<f64> = [2.0, 3.0, 6.0, 7.0].iter().map(|v: &f64| 2.0 * (*v as f32 / 15.0) as f64 - 1.0).collect();
        assert_eq!(&t.data()[4..8], expect.as_slice());
        assert!(patch_tokens(&plane, 4, 3).is_err());
    }

    #[test]
    fn memory_store_caches_stems() {
        let v = Volume::from_fn([10, 8, 8], |z, y, x| (z + y + x) as f32);
        let scan = ScanVolume::new("a", v, None, None).unwrap();
        let store = MemoryViewStore::from_raw(&[scan], &[ScanView::Orig], &PrepConfig::default()).unwrap();
        let a = store.stem3d("a", ScanView::Orig, [4, 4, 4]).unwrap();
        let b = store.stem3d("a", ScanView::Orig, [4, 4, 4]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), [4, 4, 4]);
        let s = store.stem2d("a", ScanView::Orig, SliceResolution::Res24x448, 8).unwrap();
        assert_eq!(s.dims(), [24, 8, 8]);
        assert!(store.prepared("a", ScanView::Lung).is_err());
    }
}
