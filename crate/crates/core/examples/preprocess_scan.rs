//! One phantom scan through trimming, lung extraction, canonicalization and
//! scan-level augmentation.

use sourceaware::prep::{
    augment_scan, canonicalize_2d, canonicalize_3d, extract_lung_with, sample_augment_params, trim_slices, AugmentBounds,
    PrepConfig,
};
use sourceaware::rng::substream;
use sourceaware::synth::{default_lesions, default_profiles, generate_scan};
use sourceaware::volume::Label;

fn main() -> sourceaware::Result<()> {
    let mut rng = substream(1, &["example", "preprocess"]);
    // source 1 scans are long enough to be trimmed
    let g = generate_scan(&default_profiles()[1], Label::Covid, &default_lesions()[1], &mut rng)?;
    println!("raw      {:?}, {} lesions", g.scan.voxels.dims(), g.lesions.len());

    let cfg = PrepConfig::default();
    let trimmed = trim_slices(&g.scan, cfg.slice_threshold, cfg.trim_fraction)?;
    println!("trimmed  {:?}", trimmed.voxels.dims());

    let ext = extract_lung_with(&trimmed, &cfg.lung);
    println!("lung     threshold {:.3}, bbox {:?}, {} voxels kept", ext.threshold, ext.bbox, ext.kept_voxels);

    let c3 = canonicalize_3d(&ext.scan)?;
    let (lo, hi) = c3.volume().min_max();
    println!("3D stem  {:?}, range [{lo}, {hi}]", c3.volume().dims());
    let c2 = canonicalize_2d(&ext.scan)?;
    println!("2D stem  {:?}", c2.volume().dims());

    let params = sample_augment_params(&mut rng, &AugmentBounds::default(), c3.volume().dims());
    let aug = augment_scan(&c3, &params)?;
    println!(
        "augment  crop {:?}+{:?}, rotation {:.2} deg -> {:?}",
        params.crop_box.origin,
        params.crop_box.extent,
        params.rotation_degrees,
        aug.volume().dims()
    );
    Ok(())
}
