//! Synthetic four-source phantom scans.
//!
//! Each scan holds two bright ellipsoidal "lungs" on a background whose
//! style, intensity offset, noise level, slice count and field of view
//! depend on the source. Positive scans add brighter blobs inside the lungs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ledger::{Split, SplitLedger};
use crate::manifest::{write_truth, Manifest, ManifestRow, TruthRow, MANIFEST_FILE, TEST_TRUTH_FILE};
use crate::rng::substream;
use crate::volume::{Label, ScanVolume, SourceId, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackgroundStyle {
    DarkBorder,
    BrightRing,
    Plain,
    Textured,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceProfile {
    pub source_id: SourceId,
    pub intensity_bias: f64,
    pub noise_sigma: f64,
    pub slice_count_range: (usize, usize),
    pub field_of_view_scale: f64,
    pub background_style: BackgroundStyle,
    /// Rows and columns of every slice.
    pub in_plane: usize,
}

impl SourceProfile {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.slice_count_range;
        if lo < 8 || hi < lo {
            return Err(Error::InvalidArgument(format!("slice_count_range {lo}..={hi} needs 8 <= min <= max")));
        }
        if !(self.noise_sigma >= 0.0) || !self.intensity_bias.is_finite() {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0 and bias finite".into()));
        }
        if !(0.3..=1.2).contains(&self.field_of_view_scale) {
            return Err(Error::InvalidArgument(format!(
                "field_of_view_scale {} outside [0.3, 1.2]",
                self.field_of_view_scale
            )));
        }
        if self.in_plane < 16 {
            return Err(Error::InvalidArgument("in_plane must be at least 16".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionSpec {
    pub count_range: (usize, usize),
    /// In-plane radius in voxels.
    pub radius_range: (f64, f64),
    pub intensity_delta: f64,
}

impl LesionSpec {
    pub fn validate(&self) -> Result<()> {
        let (c0, c1) = self.count_range;
        let (r0, r1) = self.radius_range;
        if c0 < 1 || c1 < c0 {
            return Err(Error::InvalidArgument(format!("lesion count_range {c0}..={c1} needs 1 <= min <= max")));
        }
        if !(r0 > 0.0) || r1 < r0 {
            return Err(Error::InvalidArgument(format!("lesion radius_range {r0}..{r1} invalid")));
        }
        Ok(())
    }
}

pub fn default_profiles() -> [SourceProfile; 4] {
    let mk = |id: u8, bias, sigma, range, fov, style| SourceProfile {
        source_id: SourceId::new(id).unwrap(),
        intensity_bias: bias,
        noise_sigma: sigma,
        slice_count_range: range,
        field_of_view_scale: fov,
        background_style: style,
        in_plane: 64,
    };
    [
        mk(0, 0.0, 0.02, (40, 110), 0.9, BackgroundStyle::BrightRing),
        mk(1, 0.3, 0.05, (120, 180), 0.75, BackgroundStyle::DarkBorder),
        mk(2, -0.2, 0.03, (160, 230), 1.0, BackgroundStyle::Plain),
        mk(3, 0.6, 0.04, (90, 160), 0.85, BackgroundStyle::Textured),
    ]
}

/// Source 0 lesions are larger and brighter than the rest.
pub fn default_lesions() -> [LesionSpec; 4] {
    let strong = LesionSpec {
        count_range: (3, 5),
        radius_range: (4.5, 6.5),
        intensity_delta: 0.45,
    };
    let normal = LesionSpec {
        count_range: (3, 5),
        radius_range: (3.5, 5.5),
        intensity_delta: 0.3,
    };
    [strong, normal.clone(), normal.clone(), normal]
}

/// Axis-aligned ellipsoid in voxel coordinates `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radial distance; `< 1` inside.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.distance(p) < 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionPlacement {
    pub shape: Ellipsoid,
    /// Index of the lung ellipsoid holding the center.
    pub lung: usize,
}

/// A generated scan plus the generator's own placement log.
#[derive(Clone, Debug)]
pub struct GeneratedScan {
    pub scan: ScanVolume,
    pub lungs: [Ellipsoid; 2],
    pub lesions: Vec<LesionPlacement>,
    pub lung_value: f64,
    pub lesion_delta: f64,
}

impl GeneratedScan {
    /// Per raw slice: whether any lesion core crosses it.
    pub fn lesion_slices(&self) -> Vec<bool> {
        let s = self.scan.voxels.slices();
        (0..s)
            .map(|z| {
                self.lesions
                    .iter()
                    .any(|l| ((z as f64 - l.shape.center[0]) / l.shape.radii[0]).abs() < 0.7)
            })
            .collect()
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn background(style: BackgroundStyle, bias: f64, u: f64, v: f64) -> f64 {
    let (du, dv) = (u - 0.5, v - 0.5);
    let rho = (du * du + dv * dv).sqrt();
    match style {
        BackgroundStyle::Plain => bias,
        BackgroundStyle::DarkBorder => {
            if rho > 0.42 {
                bias - 0.25
            } else {
                bias
            }
        }
        BackgroundStyle::BrightRing => {
            // twelve separate arcs so no single ring component outgrows a lung
            let angle = dv.atan2(du).rem_euclid(std::f64::consts::TAU).to_degrees();
            if (0.43..0.48).contains(&rho) && angle % 30.0 < 18.0 {
                bias + 0.7
            } else {
                bias
            }
        }
        BackgroundStyle::Textured => {
            let t = (std::f64::consts::TAU * 6.0 * u).sin() * (std::f64::consts::TAU * 5.0 * v).sin();
            bias + 0.06 * (1.0 + t)
        }
    }
}

/// Generates one phantom. `label = NonCovid` never places lesions.
pub fn generate_scan<R: Rng + ?Sized>(
    profile: &SourceProfile,
    label: Label,
    lesions: &LesionSpec,
    rng: &mut R,
) -> Result<GeneratedScan> {
    profile.validate()?;
    lesions.validate()?;
    let (lo, hi) = profile.slice_count_range;
    let s = rng.random_range(lo..=hi);
    let n = profile.in_plane;
    let (sf, nf) = (s as f64, n as f64);
    let fov = profile.field_of_view_scale;

    let jitter = |r: &mut R, spread: f64| r.random_range(-spread..=spread);
    let mut lungs = [Ellipsoid {
        center: [0.0; 3],
        radii: [0.0; 3],
    }; 2];
    for (k, lung) in lungs.iter_mut().enumerate() {
        let side = if k == 0 { -1.0 } else { 1.0 };
        let cz = 0.5 + jitter(rng, 0.02);
        let cy = 0.5 + jitter(rng, 0.02);
        let cx = 0.5 + side * 0.2 * fov + jitter(rng, 0.01);
        let scale = 1.0 + jitter(rng, 0.08);
        *lung = Ellipsoid {
            center: [cz * sf - 0.5, cy * nf - 0.5, cx * nf - 0.5],
            radii: [0.38 * sf, 0.28 * fov * scale * nf, 0.15 * fov * scale * nf],
        };
    }

    let mut placed = Vec::new();
    if label == Label::Covid {
        let count = rng.random_range(lesions.count_range.0..=lesions.count_range.1);
        for _ in 0..count {
            let lung = rng.random_range(0..2);
            let l = lungs[lung];
            let center = loop {
                let p = [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                ];
                if p.iter().map(|c| c * c).sum::<f64>() < 0.36 {
                    break [
                        l.center[0] + p[0] * l.radii[0],
                        l.center[1] + p[1] * l.radii[1],
                        l.center[2] + p[2] * l.radii[2],
                    ];
                }
            };
            let r = rng.random_range(lesions.radius_range.0..=lesions.radius_range.1);
            // isotropic in normalized coordinates: scale depth radius by S / N
            placed.push(LesionPlacement {
                shape: Ellipsoid {
                    center,
                    radii: [r * sf / nf, r, r],
                },
                lung,
            });
        }
    }

    let bias = profile.intensity_bias;
    let lung_value = bias + 0.5;
    let noise = Normal::new(0.0, profile.noise_sigma.max(1e-12)).expect("valid sigma");
    let delta = lesions.intensity_delta;
    let voxels = Volume::from_fn([s, n, n], |z, y, x| {
        let p = [z as f64, y as f64, x as f64];
        let u = (x as f64 + 0.5) / nf;
        let v = (y as f64 + 0.5) / nf;
        let mut val = if lungs.iter().any(|l| l.contains(p)) {
            let mut inside = lung_value;
            for les in &placed {
                let d = les.shape.distance(p);
                if d < 1.0 {
                    inside += delta * (1.0 - smoothstep(0.6, 1.0, d));
                }
            }
            inside
        } else {
            background(profile.background_style, bias, u, v)
        };
        if profile.noise_sigma > 0.0 {
            val += noise.sample(rng);
        }
        val as f32
    });
    let scan = ScanVolume::new(String::new(), voxels, Some(profile.source_id), Some(label))?;
    Ok(GeneratedScan {
        scan,
        lungs,
        lesions: placed,
        lung_value,
        lesion_delta: delta,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub profiles: [SourceProfile; 4],
    pub lesions: [LesionSpec; 4],
    /// Extra test scans written but flagged excluded.
    pub excluded_test_scans: usize,
    /// Probability that an unlabeled test scan is positive.
    pub test_positive_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            profiles: default_profiles(),
            lesions: default_lesions(),
            excluded_test_scans: 1,
            test_positive_fraction: 0.5,
        }
    }
}

/// The ledger the default dataset is generated from: revised counts with
/// predicted test sources, scaled to `percent`.
pub fn default_synth_ledger(percent: u64) -> SplitLedger {
    crate::ledger::revised_ledger().scaled_percent(percent)
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: Manifest,
    pub truth: Vec<TruthRow>,
}

struct PendingScan {
    split: Split,
    source: Option<SourceId>,
    label: Option<Label>,
    excluded: bool,
}

/// Writes `manifest.csv`, `test_truth.csv` and `volumes/*.ctv` under
/// `out_dir`, with exactly the ledger's counts of non-excluded scans.
pub fn generate_dataset(ledger: &SplitLedger, cfg: &SynthConfig, master_seed: u64, out_dir: &Path) -> Result<SynthOutput> {
    for (i, p) in cfg.profiles.iter().enumerate() {
        p.validate()?;
        if p.source_id.index() != i {
            return Err(Error::InvalidArgument(format!("profile {i} carries source {}", p.source_id)));
        }
    }
    for l in &cfg.lesions {
        l.validate()?;
    }
    let mut pending = Vec::new();
    for (cell, n) in ledger.cells() {
        if cell.split != Split::Test && cell.class.is_none() {
            return Err(Error::Ledger(format!("{} cell {cell} has no class", cell.split)));
        }
        for _ in 0..n {
            pending.push(PendingScan {
                split: cell.split,
                source: cell.source,
                label: cell.class,
                excluded: false,
            });
        }
    }
    for _ in 0..cfg.excluded_test_scans {
        pending.push(PendingScan {
            split: Split::Test,
            source: None,
            label: None,
            excluded: true,
        });
    }
    pending.shuffle(&mut substream(master_seed, &["synth", "order"]));

    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut rows = Vec::with_capacity(pending.len());
    let mut truth = Vec::new();
    for (i, p) in pending.iter().enumerate() {
        let scan_id = format!("ct_scan_{i:05}");
        let mut rng = substream(master_seed, &["synth", "scan", &scan_id]);
        let source = match p.source {
            Some(s) => s,
            None => SourceId::new(rng.random_range(0..4u8))?,
        };
        let label = match p.label {
            Some(l) => l,
            None if rng.random_bool(cfg.test_positive_fraction) => Label::Covid,
            None => Label::NonCovid,
        };
        let g = generate_scan(&cfg.profiles[source.index()], label, &cfg.lesions[source.index()], &mut rng)?;
        let rel = format!("volumes/{scan_id}.ctv");
        g.scan.voxels.write_ctv(&out_dir.join(&rel))?;
        let hide = p.split == Split::Test;
        if hide {
            truth.push(TruthRow {
                scan_id: scan_id.clone(),
                source,
                label,
            });
        }
        rows.push(ManifestRow {
            scan_id,
            split: p.split,
            source: if hide { None } else { Some(source) },
            label: if hide { None } else { Some(label) },
            path: rel,
            excluded: p.excluded,
        });
    }
    let manifest = Manifest { rows };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    write_truth(&out_dir.join(TEST_TRUTH_FILE), &truth)?;
    Ok(SynthOutput { manifest, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn negatives_have_no_lesions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = generate_scan(&default_profiles()[1], Label::NonCovid, &default_lesions()[1], &mut rng).unwrap();
        assert!(g.lesions.is_empty());
    }

    #[test]
    fn fixed_count_lesions_sit_in_lungs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = LesionSpec {
            count_range: (3, 3),
            ..default_lesions()[2].clone()
        };
        let g = generate_scan(&default_profiles()[2], Label::Covid, &spec, &mut rng).unwrap();
        assert_eq!(g.lesions.len(), 3);
        for l in &g.lesions {
            assert!(g.lungs[l.lung].contains(l.shape.center));
        }
    }

    #[test]
    fn same_seed_same_volume() {
        let p = &default_profiles()[3];
        let a = generate_scan(p, Label::Covid, &default_lesions()[3], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_scan(p, Label::Covid, &default_lesions()[3], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.scan.voxels, b.scan.voxels);
    }

    #[test]
    fn invalid_profiles_rejected() {
        let mut p = default_profiles()[0].clone();
        p.slice_count_range = (4, 10);
        assert!(p.validate().is_err());
        let mut p = default_profiles()[0].clone();
        p.noise_sigma = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn default_slice_ranges_straddle_threshold() {
        let ps = default_profiles();
        assert!(ps.iter().any(|p| p.slice_count_range.1 <= 150));
        assert!(ps.iter().any(|p| p.slice_count_range.0 > 150));
    }
}
