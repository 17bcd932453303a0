//! Deterministic scan preprocessing: slice trimming, lung extraction,
//! canonical resampling and scan-consistent augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ScanVolume, Volume};

/// Canonical shape of the volumetric branch, `(slices, rows, cols)`.
pub const CANONICAL_3D: [usize; 3] = [128, 256, 256];
/// Canonical shape of the slice branch.
pub const CANONICAL_2D: [usize; 3] = [24, 448, 448];

pub const DEFAULT_SLICE_THRESHOLD: usize = 150;
pub const DEFAULT_TRIM_FRACTION: f64 = 0.15;

fn check_canonical(v: &Volume, shape: [usize; 3], what: &str) -> Result<()> {
    if v.dims() != shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{what} {shape:?}"),
            got: format!("{:?}", v.dims()),
        });
    }
    if v.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidVolume(format!("{what} values must lie in [0,1]")));
    }
    Ok(())
}

/// A `128x256x256` volume with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalVolume3D(Volume);

impl CanonicalVolume3D {
    pub fn new(v: Volume) -> Result<Self> {
        check_canonical(&v, CANONICAL_3D, "CanonicalVolume3D")?;
        Ok(Self(v))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }
}

/// A `24x448x448` slice stack with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack2D(Volume);

impl SliceStack2D {
    pub fn new(v: Volume) -> Result<Self> {
        check_canonical(&v, CANONICAL_2D, "SliceStack2D")?;
        Ok(Self(v))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Slice trimming

/// Half-open range of slices kept by [`trim_slices`].
pub fn trimmed_range(slices: usize, slice_threshold: usize, trim_fraction: f64) -> (usize, usize) {
    if slices <= slice_threshold {
        return (0, slices);
    }
    let cut = (trim_fraction * slices as f64).floor() as usize;
    (cut.min(slices), slices.saturating_sub(cut))
}

/// Drops `floor(trim_fraction * S)` slices from each end when `S` exceeds
/// `slice_threshold`.
pub fn trim_slices(scan: &ScanVolume, slice_threshold: usize, trim_fraction: f64) -> Result<ScanVolume> {
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(Error::InvalidArgument(format!(
            "trim_fraction {trim_fraction} must be in [0, 0.5)"
        )));
    }
    let s = scan.voxels.slices();
    let (start, end) = trimmed_range(s, slice_threshold, trim_fraction);
    if start >= end {
        return Err(Error::InvalidVolume(format!(
            "trimming {} leaves no slices (S={s})",
            scan.scan_id
        )));
    }
    if (start, end) == (0, s) {
        return Ok(scan.clone());
    }
    Ok(scan.with_voxels(scan.voxels.slice_range(start, end)?))
}

// ---------------------------------------------------------------------------
// Lung extraction

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Between-class-variance maximizing threshold on a 256-bin histogram.
    Otsu,
    Fixed(f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LungExtractConfig {
    pub threshold: ThresholdMode,
    /// Number of largest 6-connected components kept.
    pub keep_components: usize,
}

impl Default for LungExtractConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdMode::Otsu,
            keep_components: 2,
        }
    }
}

/// Inclusive voxel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    fn include(&mut self, p: [usize; 3]) {
        for a in 0..3 {
            self.min[a] = self.min[a].min(p[a]);
            self.max[a] = self.max[a].max(p[a]);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LungExtraction {
    pub scan: ScanVolume,
    pub threshold: f32,
    /// Bounding box in input coordinates; `None` when no foreground was found.
    pub bbox: Option<BoundingBox>,
    pub kept_voxels: usize,
}

pub const NO_FOREGROUND_WARNING: &str = "lung extraction: no foreground region found, scan left unchanged";

/// Otsu threshold over a 256-bin histogram spanning `[min, max]`. Voxels
/// strictly above the returned value are foreground.
pub fn otsu_threshold(data: &[f32]) -> f32 {
    const BINS: usize = 256;
    let (lo, hi) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return lo;
    }
    let width = f64::from(hi - lo) / BINS as f64;
    let mut hist = [0u64; BINS];
    for &v in data {
        let b = ((f64::from(v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = data.len() as f64;
    let center = |b: usize| f64::from(lo) + (b as f64 + 0.5) * width;
    let sum_all: f64 = hist.iter().enumerate().map(|(b, &c)| c as f64 * center(b)).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += c as f64 * center(k);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    (f64::from(lo) + (best_k as f64 + 1.0) * width) as f32
}

/// 6-connected component labelling. Returns per-voxel labels (0 = background)
/// and component sizes indexed by `label - 1`, in raster discovery order.
pub fn label_components(mask: &[bool], dims: [usize; 3]) -> (Vec<u32>, Vec<usize>) {
    let [d, h, w] = dims;
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let x = i % w;
            let y = (i / w) % h;
            let z = i / (w * h);
            let mut visit = |j: usize| {
                if mask[j] && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if z > 0 {
                visit(i - w * h);
            }
            if z + 1 < d {
                visit(i + w * h);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Lung extraction with the default configuration (Otsu threshold, two
/// largest components).
pub fn extract_lung(scan: &ScanVolume) -> ScanVolume {
    extract_lung_with(scan, &LungExtractConfig::default()).scan
}

/// Thresholds the scan, keeps the largest connected components, zeroes every
/// other voxel and crops to the kept components' bounding box.
pub fn extract_lung_with(scan: &ScanVolume, cfg: &LungExtractConfig) -> LungExtraction {
    let vol = &scan.voxels;
    let threshold = match cfg.threshold {
        ThresholdMode::Otsu => otsu_threshold(vol.data()),
        ThresholdMode::Fixed(t) => t,
    };
    let mask: Vec<bool> = vol.data().iter().map(|&v| v > threshold).collect();
    let (labels, sizes) = label_components(&mask, vol.dims());
    if sizes.is_empty() || cfg.keep_components == 0 {
        let mut out = scan.clone();
        out.warnings.push(NO_FOREGROUND_WARNING.to_string());
        return LungExtraction {
            scan: out,
            threshold,
            bbox: None,
            kept_voxels: 0,
        };
    }
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut keep = vec![false; sizes.len() + 1];
    for &c in order.iter().take(cfg.keep_components) {
        keep[c + 1] = true;
    }
    let [_, h, w] = vol.dims();
    let mut bbox: Option<BoundingBox> = None;
    let mut kept_voxels = 0;
    for (i, &l) in labels.iter().enumerate() {
        if keep[l as usize] && l != 0 {
            kept_voxels += 1;
            let p = [i / (w * h), (i / w) % h, i % w];
            match &mut bbox {
                Some(b) => b.include(p),
                None => bbox = Some(BoundingBox { min: p, max: p }),
            }
        }
    }
    let bbox = bbox.expect("at least one kept voxel");
    let ext = bbox.extent();
    let cropped = Volume::from_fn(ext, |z, y, x| {
        let (sz, sy, sx) = (z + bbox.min[0], y + bbox.min[1], x + bbox.min[2]);
        let i = vol.index(sz, sy, sx);
        if labels[i] != 0 && keep[labels[i] as usize] {
            vol.data()[i]
        } else {
            0.0
        }
    });
    LungExtraction {
        scan: scan.with_voxels(cropped),
        threshold,
        bbox: Some(bbox),
        kept_voxels,
    }
}

// ---------------------------------------------------------------------------
// Resampling and normalization

/// Linear interpolation taps `(i0, i1, t)` mapping an output axis of length
/// `out_len` onto an input axis of length `in_len` with half-voxel alignment
/// and edge clamping.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

fn resample_axis(v: &Volume, axis: usize, new_len: usize) -> Volume {
    let [d, h, w] = v.dims();
    let src = v.data();
    match axis {
        0 => {
            let taps = linear_taps(d, new_len);
            let n = h * w;
            let mut out = vec![0.0f32; new_len * n];
            for (z, &(i0, i1, t)) in taps.iter().enumerate() {
                let a = &src[i0 * n..(i0 + 1) * n];
                let b = &src[i1 * n..(i1 + 1) * n];
                for ((o, &av), &bv) in out[z * n..(z + 1) * n].iter_mut().zip(a).zip(b) {
                    *o = av * (1.0 - t) + bv * t;
                }
            }
            Volume::new([new_len, h, w], out).unwrap()
        }
        1 => {
            let taps = linear_taps(h, new_len);
            let mut out = vec![0.0f32; d * new_len * w];
            for z in 0..d {
                for (y, &(i0, i1, t)) in taps.iter().enumerate() {
                    let a = &src[(z * h + i0) * w..(z * h + i0 + 1) * w];
                    let b = &src[(z * h + i1) * w..(z * h + i1 + 1) * w];
                    let o = &mut out[(z * new_len + y) * w..(z * new_len + y + 1) * w];
                    for ((o, &av), &bv) in o.iter_mut().zip(a).zip(b) {
                        *o = av * (1.0 - t) + bv * t;
                    }
                }
            }
            Volume::new([d, new_len, w], out).unwrap()
        }
        _ => {
            let taps = linear_taps(w, new_len);
            let mut out = vec![0.0f32; d * h * new_len];
            for (row, orow) in src.chunks(w).zip(out.chunks_mut(new_len)) {
                for (o, &(i0, i1, t)) in orow.iter_mut().zip(&taps) {
                    *o = row[i0] * (1.0 - t) + row[i1] * t;
                }
            }
            Volume::new([d, h, new_len], out).unwrap()
        }
    }
}

/// Separable trilinear resampling with edge clamping. Axes are processed in
/// order of increasing scale factor to keep intermediates small.
pub fn resample_trilinear(v: &Volume, target: [usize; 3]) -> Volume {
    let dims = v.dims();
    let mut axes = [0usize, 1, 2];
    axes.sort_by(|&a, &b| {
        let ra = target[a] as f64 / dims[a] as f64;
        let rb = target[b] as f64 / dims[b] as f64;
        ra.partial_cmp(&rb).unwrap().then(a.cmp(&b))
    });
    let mut cur: Option<Volume> = None;
    for axis in axes {
        let src = cur.as_ref().unwrap_or(v);
        if src.dims()[axis] == target[axis] {
            continue;
        }
        cur = Some(resample_axis(src, axis, target[axis]));
    }
    cur.unwrap_or_else(|| v.clone())
}

/// Per-volume min-max scaling to `[0, 1]`; constant volumes become all zeros.
pub fn normalize_min_max(v: &mut Volume) {
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    if !(range > 0.0) {
        v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let inv = 1.0 / range;
    for x in v.data_mut() {
        *x = ((*x - lo) * inv).clamp(0.0, 1.0);
    }
}

/// Resamples to `target` and min-max normalizes.
pub fn canonicalize(scan: &ScanVolume, target: [usize; 3]) -> Result<Volume> {
    if !scan.voxels.all_finite() {
        return Err(Error::NonFinite(format!("scan {} contains NaN/Inf", scan.scan_id)));
    }
    let mut v = resample_trilinear(&scan.voxels, target);
    normalize_min_max(&mut v);
    Ok(v)
}

pub fn canonicalize_3d(scan: &ScanVolume) -> Result<CanonicalVolume3D> {
    CanonicalVolume3D::new(canonicalize(scan, CANONICAL_3D)?)
}

pub fn canonicalize_2d(scan: &ScanVolume) -> Result<SliceStack2D> {
    SliceStack2D::new(canonicalize(scan, CANONICAL_2D)?)
}

// ---------------------------------------------------------------------------
// Pooling stems

fn pool_bins(in_len: usize, out_len: usize) -> Vec<(usize, usize)> {
    (0..out_len)
        .map(|i| {
            let start = i * in_len / out_len;
            let end = ((i + 1) * in_len).div_ceil(out_len);
            (start, end.max(start + 1))
        })
        .collect()
}

/// Adaptive average pooling of a 2D plane to `out_h x out_w`.
pub fn adaptive_avg_pool2d(plane: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let by = pool_bins(h, out_h);
    let bx = pool_bins(w, out_w);
    let mut rows = vec![0.0f32; h * out_w];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for (x, &(s, e)) in bx.iter().enumerate() {
            rows[y * out_w + x] = src[s..e].iter().sum::<f32>() / (e - s) as f32;
        }
    }
    let mut out = vec![0.0f32; out_h * out_w];
    for (y, &(s, e)) in by.iter().enumerate() {
        for r in s..e {
            for x in 0..out_w {
                out[y * out_w + x] += rows[r * out_w + x];
            }
        }
        for x in 0..out_w {
            out[y * out_w + x] /= (e - s) as f32;
        }
    }
    out
}

/// Adaptive average pooling of a volume to `target`.
pub fn adaptive_avg_pool3d(v: &Volume, target: [usize; 3]) -> Volume {
    let [d, h, w] = v.dims();
    let planes: Vec<Vec<f32>> = (0..d)
        .map(|z| adaptive_avg_pool2d(v.slice(z), h, w, target[1], target[2]))
        .collect();
    let n = target[1] * target[2];
    let mut out = vec![0.0f32; target[0] * n];
    for (z, &(s, e)) in pool_bins(d, target[0]).iter().enumerate() {
        let o = &mut out[z * n..(z + 1) * n];
        for p in &planes[s..e] {
            for (a, b) in o.iter_mut().zip(p) {
                *a += b;
            }
        }
        for a in o.iter_mut() {
            *a /= (e - s) as f32;
        }
    }
    Volume::new(target, out).unwrap()
}

// ---------------------------------------------------------------------------
// Augmentation

/// Bounds for random scan-level augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentBounds {
    /// Crop extent per axis as a fraction of the volume size, `[min, max]`.
    pub extent_fraction: [[f64; 2]; 3],
    /// In-plane rotation is drawn from `[-max_rotation_degrees, max_rotation_degrees]`.
    pub max_rotation_degrees: f64,
}

impl Default for AugmentBounds {
    fn default() -> Self {
        Self {
            extent_fraction: [[0.85, 1.0], [0.85, 1.0], [0.85, 1.0]],
            max_rotation_degrees: 10.0,
        }
    }
}

impl AugmentBounds {
    /// Bounds that only ever produce the identity transform.
    pub fn identity() -> Self {
        Self {
            extent_fraction: [[1.0, 1.0]; 3],
            max_rotation_degrees: 0.0,
        }
    }

    pub fn without_rotation(mut self) -> Self {
        self.max_rotation_degrees = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for [lo, hi] in self.extent_fraction {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "crop extent fraction [{lo}, {hi}] must satisfy 0 < min <= max <= 1"
                )));
            }
        }
        if !(self.max_rotation_degrees >= 0.0 && self.max_rotation_degrees.is_finite()) {
            return Err(Error::InvalidArgument("rotation bound must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub crop_box: CropBox,
    pub rotation_degrees: f64,
    pub resize_target: [usize; 3],
}

impl AugmentParams {
    pub fn identity(shape: [usize; 3]) -> Self {
        Self {
            crop_box: CropBox {
                origin: [0; 3],
                extent: shape,
            },
            rotation_degrees: 0.0,
            resize_target: shape,
        }
    }

    pub fn validate_for(&self, shape: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            let (o, e) = (self.crop_box.origin[a], self.crop_box.extent[a]);
            if e == 0 || o + e > shape[a] {
                return Err(Error::InvalidArgument(format!(
                    "crop box {:?} exceeds volume {shape:?} on axis {a}",
                    self.crop_box
                )));
            }
            if self.resize_target[a] == 0 {
                return Err(Error::InvalidArgument("resize target has a zero axis".into()));
            }
        }
        if !self.rotation_degrees.is_finite() {
            return Err(Error::InvalidArgument("rotation must be finite".into()));
        }
        Ok(())
    }
}

/// Draws one parameter set for a volume of `shape`; output size equals `shape`.
pub fn sample_augment_params<R: Rng + ?Sized>(rng: &mut R, bounds: &AugmentBounds, shape: [usize; 3]) -> AugmentParams {
    let mut origin = [0; 3];
    let mut extent = [0; 3];
    for a in 0..3 {
        let [lo, hi] = bounds.extent_fraction[a];
        let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let e = ((frac * shape[a] as f64).round() as usize).clamp(1, shape[a]);
        extent[a] = e;
        origin[a] = if e < shape[a] { rng.random_range(0..=shape[a] - e) } else { 0 };
    }
    let r = bounds.max_rotation_degrees;
    let rotation_degrees = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    AugmentParams {
        crop_box: CropBox { origin, extent },
        rotation_degrees,
        resize_target: shape,
    }
}

/// Receives one callback per output slice produced by [`augment_volume`].
pub trait AugmentObserver {
    fn on_slice(&mut self, slice: usize, params: &AugmentParams);
}

impl<F: FnMut(usize, &AugmentParams)> AugmentObserver for F {
    fn on_slice(&mut self, slice: usize, params: &AugmentParams) {
        self(slice, params)
    }
}

pub struct NoopObserver;

impl AugmentObserver for NoopObserver {
    fn on_slice(&mut self, _: usize, _: &AugmentParams) {}
}

#[derive(Clone, Copy)]
struct PlaneTap {
    i00: u32,
    i01: u32,
    i10: u32,
    i11: u32,
    ty: f32,
    tx: f32,
}

fn clamp_src(pos: f64, origin: usize, extent: usize, out_len: usize) -> f64 {
    let s = origin as f64 + (pos + 0.5) * extent as f64 / out_len as f64 - 0.5;
    s.clamp(origin as f64, (origin + extent - 1) as f64)
}

/// In-plane sampling table: output pixel -> bilinear taps in an input slice.
fn plane_taps(params: &AugmentParams, in_w: usize) -> Vec<PlaneTap> {
    let [_, oh, ow] = params.resize_target;
    let cb = params.crop_box;
    let theta = params.rotation_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (oh as f64 - 1.0) / 2.0;
    let cx = (ow as f64 - 1.0) / 2.0;
    let mut taps = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse rotation: the output is the input rotated by +theta
            let ry = cos * dy - sin * dx + cy;
            let rx = sin * dy + cos * dx + cx;
            let sy = clamp_src(ry, cb.origin[1], cb.extent[1], oh);
            let sx = clamp_src(rx, cb.origin[2], cb.extent[2], ow);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let y1 = (y0 + 1).min(cb.origin[1] + cb.extent[1] - 1);
            let x1 = (x0 + 1).min(cb.origin[2] + cb.extent[2] - 1);
            taps.push(PlaneTap {
                i00: (y0 * in_w + x0) as u32,
                i01: (y0 * in_w + x1) as u32,
                i10: (y1 * in_w + x0) as u32,
                i11: (y1 * in_w + x1) as u32,
                ty: (sy - y0 as f64) as f32,
                tx: (sx - x0 as f64) as f32,
            });
        }
    }
    taps
}

#[inline]
fn sample_tap(plane: &[f32], t: &PlaneTap) -> f32 {
    let top = plane[t.i00 as usize] * (1.0 - t.tx) + plane[t.i01 as usize] * t.tx;
    let bot = plane[t.i10 as usize] * (1.0 - t.tx) + plane[t.i11 as usize] * t.tx;
    top * (1.0 - t.ty) + bot * t.ty
}

/// Output slice index -> `(z0, z1, t)` blend of input slices.
pub fn slice_axis_taps(params: &AugmentParams) -> Vec<(usize, usize, f32)> {
    let cb = params.crop_box;
    (0..params.resize_target[0])
        .map(|z| {
            let s = clamp_src(z as f64, cb.origin[0], cb.extent[0], params.resize_target[0]);
            let z0 = s.floor() as usize;
            let z1 = (z0 + 1).min(cb.origin[0] + cb.extent[0] - 1);
            (z0, z1, (s - z0 as f64) as f32)
        })
        .collect()
}

/// Applies the in-plane part of `params` (crop, resize, rotation) to one
/// input slice of a volume.
pub fn warp_slice(v: &Volume, z: usize, params: &AugmentParams) -> Vec<f32> {
    let taps = plane_taps(params, v.dims()[2]);
    let plane = v.slice(z);
    taps.iter().map(|t| sample_tap(plane, t)).collect()
}

/// Crops, resizes and rotates a whole volume with one parameter set shared by
/// every slice.
pub fn augment_volume(v: &Volume, params: &AugmentParams, observer: &mut dyn AugmentObserver) -> Result<Volume> {
    params.validate_for(v.dims())?;
    let taps = plane_taps(params, v.dims()[2]);
    let [od, oh, ow] = params.resize_target;
    let n = oh * ow;
    let mut out = vec![0.0f32; od * n];
    for (z, &(z0, z1, t)) in slice_axis_taps(params).iter().enumerate() {
        observer.on_slice(z, params);
        let a = v.slice(z0);
        let b = v.slice(z1);
        let o = &mut out[z * n..(z + 1) * n];
        if t == 0.0 {
            for (ov, tap) in o.iter_mut().zip(&taps) {
                *ov = sample_tap(a, tap);
            }
        } else {
            for (ov, tap) in o.iter_mut().zip(&taps) {
                *ov = sample_tap(a, tap) * (1.0 - t) + sample_tap(b, tap) * t;
            }
        }
    }
    Volume::new(params.resize_target, out)
}

/// Scan-level augmentation of a canonical volume; the output keeps the
/// canonical shape.
pub fn augment_scan(volume: &CanonicalVolume3D, params: &AugmentParams) -> Result<CanonicalVolume3D> {
    augment_scan_observed(volume, params, &mut NoopObserver)
}

pub fn augment_scan_observed(
    volume: &CanonicalVolume3D,
    params: &AugmentParams,
    observer: &mut dyn AugmentObserver,
) -> Result<CanonicalVolume3D> {
    if params.resize_target != CANONICAL_3D {
        return Err(Error::ShapeMismatch {
            expected: format!("resize target {CANONICAL_3D:?}"),
            got: format!("{:?}", params.resize_target),
        });
    }
    let out = augment_volume(volume.volume(), params, observer)?;
    CanonicalVolume3D::new(out)
}

// ---------------------------------------------------------------------------
// Full preprocessing

/// Which view of a scan a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanView {
    Orig,
    Lung,
}

impl ScanView {
    pub fn as_str(self) -> &'static str {
        match self {
            ScanView::Orig => "orig",
            ScanView::Lung => "lung",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub slice_threshold: usize,
    pub trim_fraction: f64,
    pub lung: LungExtractConfig,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            slice_threshold: DEFAULT_SLICE_THRESHOLD,
            trim_fraction: DEFAULT_TRIM_FRACTION,
            lung: LungExtractConfig::default(),
        }
    }
}

/// Trim first, then extract the lung region when the lung view is requested.
pub fn prepare_view(scan: &ScanVolume, view: ScanView, cfg: &PrepConfig) -> Result<ScanVolume> {
    let trimmed = trim_slices(scan, cfg.slice_threshold, cfg.trim_fraction)?;
    Ok(match view {
        ScanView::Orig => trimmed,
        ScanView::Lung => extract_lung_with(&trimmed, &cfg.lung).scan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan(dims: [usize; 3], f: impl FnMut(usize, usize, usize) -> f32) -> ScanVolume {
        ScanVolume::new("t", Volume::from_fn(dims, f), None, None).unwrap()
    }

    #[test]
    fn trim_boundaries() {
        for (s, expect) in [(150, 150), (151, 107), (200, 140), (10, 10)] {
            let sc = scan([s, 2, 2], |z, _, _| z as f32);
            let t = trim_slices(&sc, 150, 0.15).unwrap();
            assert_eq!(t.voxels.slices(), expect, "S={s}");
        }
        // order preserved: first kept slice of S=200 is slice 30
        let sc = scan([200, 1, 1], |z, _, _| z as f32);
        let t = trim_slices(&sc, 150, 0.15).unwrap();
        assert_eq!(t.voxels.data()[0], 30.0);
        assert_eq!(*t.voxels.data().last().unwrap(), 169.0);
    }

    #[test]
    fn trim_rejects_bad_fraction() {
        let sc = scan([4, 1, 1], |_, _, _| 0.0);
        assert!(trim_slices(&sc, 2, 0.5).is_err());
        assert!(trim_slices(&sc, 2, -0.1).is_err());
    }

    #[test]
    fn trim_never_empties_a_scan() {
        // floor(f*S) < S/2 for f < 0.5, so at least one slice survives
        for s in 1..40 {
            let sc = scan([s, 1, 1], |_, _, _| 0.0);
            assert!(trim_slices(&sc, 0, 0.49).unwrap().voxels.slices() >= 1);
        }
        let sc = scan([3, 1, 1], |_, _, _| 0.0);
        assert_eq!(trim_slices(&sc, 0, 0.49).unwrap().voxels.slices(), 1);
    }

    #[test]
    fn otsu_separates_two_modes() {
        let mut data = vec![0.1f32; 500];
        data.extend(vec![0.9f32; 300]);
        let t = otsu_threshold(&data);
        assert!(t > 0.1 && t < 0.9, "threshold {t}");
        assert_eq!(otsu_threshold(&[0.5; 10]), 0.5);
    }

    #[test]
    fn components_are_six_connected() {
        // two voxels touching only diagonally are separate components
        let mut mask = vec![false; 8];
        mask[0] = true; // (0,0,0)
        mask[3] = true; // (0,1,1)
        let (labels, sizes) = label_components(&mask, [2, 2, 2]);
        assert_eq!(sizes, vec![1, 1]);
        assert_ne!(labels[0], labels[3]);
    }

    #[test]
    fn all_zero_volume_is_unchanged_with_warning() {
        let sc = scan([4, 5, 6], |_, _, _| 0.0);
        let out = extract_lung(&sc);
        assert_eq!(out.voxels, sc.voxels);
        assert_eq!(out.warnings, vec![NO_FOREGROUND_WARNING.to_string()]);
    }

    #[test]
    fn keeps_two_largest_components() {
        let sc = scan([6, 20, 20], |z, y, x| {
            let big_a = (1..5).contains(&z) && (2..8).contains(&y) && (2..8).contains(&x);
            let big_b = (1..5).contains(&z) && (11..18).contains(&y) && (11..18).contains(&x);
            let speck = z == 5 && y == 19 && x == 0;
            if big_a || big_b || speck {
                1.0
            } else {
                0.0
            }
        });
        let ex = extract_lung_with(&sc, &LungExtractConfig::default());
        let bb = ex.bbox.unwrap();
        assert_eq!(bb.min, [1, 2, 2]);
        assert_eq!(bb.max, [4, 17, 17]);
        assert_eq!(ex.kept_voxels, 4 * 36 + 4 * 49);
    }

    #[test]
    fn linear_taps_identity_and_halving() {
        for (i, &(i0, _, t)) in linear_taps(7, 7).iter().enumerate() {
            assert_eq!(i0, i);
            assert_eq!(t, 0.0);
        }
        let taps = linear_taps(48, 24);
        for (k, &(i0, i1, t)) in taps.iter().enumerate() {
            assert_eq!(i0, 2 * k);
            assert_eq!(i1, 2 * k + 1);
            assert!((t - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn normalization_of_constant_is_zero() {
        let mut v = Volume::from_fn([2, 2, 2], |_, _, _| 3.5);
        normalize_min_max(&mut v);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adaptive_pool_exact_blocks() {
        let v = Volume::from_fn([4, 4, 4], |z, y, x| (z / 2 * 4 + y / 2 * 2 + x / 2) as f32);
        let p = adaptive_avg_pool3d(&v, [2, 2, 2]);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        // uneven bins still average
        let plane: Vec<f32> = (0..5).map(|i| i as f32).collect();
        let out = adaptive_avg_pool2d(&plane, 1, 5, 1, 2);
        assert_eq!(out, vec![1.0, 3.0]);
    }

    #[test]
    fn augment_rejects_crop_outside_volume() {
        let v = Volume::zeros([4, 4, 4]);
        let mut p = AugmentParams::identity([4, 4, 4]);
        p.crop_box.origin = [1, 0, 0];
        assert!(augment_volume(&v, &p, &mut NoopObserver).is_err());
    }

    #[test]
    fn zero_width_bounds_give_identity_params() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let p = sample_augment_params(&mut rng, &AugmentBounds::identity(), [8, 9, 10]);
        assert_eq!(p, AugmentParams::identity([8, 9, 10]));
    }
}
