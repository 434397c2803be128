//! Synthetic domains: variety, reproducibility and the target hue shift.

use std::collections::HashSet;

use fsgan_core::data::{load_image_dir, DatasetSource};
use fsgan_core::synth::{synth_domain, SynthDomainSpec};

/// Hue in turns of a saturated RGB pixel in [0, 1], or None for grey-ish pixels.
fn hue_of(r: f64, g: f64, b: f64) -> Option<f64> {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max <= 0.0 || (max - min) / max <= 0.4 {
        return None;
    }
    let c = max - min;
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    Some(h / 6.0)
}

fn peak_bin(chw: &[f32], res: usize, bins: usize) -> usize {
    let plane = res * res;
    let mut hist = vec![0usize; bins];
    for p in 0..plane {
        let px = |k: usize| (chw[k * plane + p] as f64 + 1.0) / 2.0;
        if let Some(h) = hue_of(px(0), px(1), px(2)) {
            hist[((h * bins as f64) as usize).min(bins - 1)] += 1;
        }
    }
    (0..bins).max_by_key(|&i| (hist[i], std::cmp::Reverse(i))).unwrap()
}

#[test]
fn five_thousand_sources_are_distinct() {
    let ds = synth_domain(&SynthDomainSpec::source(5000, 1, 32)).unwrap();
    let labels = ds.labels.as_ref().unwrap();
    let tuples: HashSet<_> = labels
        .iter()
        .map(|a| (a.shape as u8, a.hue.to_bits(), a.x.to_bits(), a.y.to_bits(), a.scale.to_bits(), a.accessory, a.background.to_bits()))
        .collect();
    let collisions = 5000 - tuples.len();
    assert!((collisions as f64) < 0.01 * 5000.0, "{collisions} collisions");
    let images: HashSet<Vec<u32>> = (0..5000).map(|i| ds.images.row(i).iter().map(|v| v.to_bits()).collect()).collect();
    assert!(images.len() as f64 > 0.99 * 5000.0);
}

#[test]
fn shifted_targets_peak_at_hues_no_source_image_uses() {
    const BINS: usize = 12;
    let source = synth_domain(&SynthDomainSpec::source(2000, 1, 32)).unwrap();
    let target = synth_domain(&SynthDomainSpec::target(10, 100, 32)).unwrap();
    let source_peaks: HashSet<usize> = (0..source.len()).map(|i| peak_bin(source.images.row(i), 32, BINS)).collect();
    for i in 0..10 {
        let p = peak_bin(target.images.row(i), 32, BINS);
        assert!(!source_peaks.contains(&p), "target {i} peaks in bin {p}, shared with the source {source_peaks:?}");
        assert_eq!(Some(p), fsgan_core::synth::hue_histogram_peak(target.images.row(i), 32, BINS));
    }
}

#[test]
fn same_spec_is_bit_identical_and_seed_matters() {
    let spec = SynthDomainSpec::target(10, 7, 32);
    let (a, b) = (synth_domain(&spec).unwrap(), synth_domain(&spec).unwrap());
    assert_eq!(a.images, b.images);
    assert!(matches!(a.source, DatasetSource::Synthetic { .. }));
    assert_ne!(synth_domain(&SynthDomainSpec::target(10, 8, 32)).unwrap().images, a.images);
}

#[test]
fn written_domains_reload_within_quantization() {
    let ds = synth_domain(&SynthDomainSpec::target(10, 3, 32)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    ds.save_dir(tmp.path()).unwrap();
    let back = load_image_dir(tmp.path(), 32).unwrap();
    assert_eq!(back.len(), 10);
    for (x, y) in ds.images.data().iter().zip(back.images.data()) {
        assert!((x - y).abs() <= 1.0 / 255.0 + 1e-6);
    }
}
