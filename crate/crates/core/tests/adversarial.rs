//! Latent subspace statistics, patch-head locality and receptive-field selection.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::*;
use fsgan_core::adversarial::{adv_loss, sample_anchors, sample_latent, scaled_band, sub_count, AdvForm, PatchHeadConfig};
use fsgan_core::autograd::Tape;
use fsgan_core::config::ModelSpec;
use fsgan_core::nets::{build_discriminator, Discriminator, Network};
use fsgan_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn subspace_noise_has_the_configured_spread() {
    const BATCHES: usize = 1000;
    const BATCH: usize = 100;
    let dim = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let anchors = sample_anchors(10, dim, 0.05, &mut rng).unwrap();
    let mut sums = vec![0.0f64; dim];
    let mut squares = vec![0.0f64; dim];
    let mut n = 0usize;
    for _ in 0..BATCHES {
        let lb = sample_latent::<f64, _>(BATCH, 1.0, &anchors, &mut rng).unwrap();
        for i in 0..BATCH {
            let a = &anchors.anchors[lb.anchor_index[i].unwrap()];
            for (c, (&z, &m)) in lb.z.row(i).iter().zip(a).enumerate() {
                sums[c] += z - m;
                squares[c] += (z - m) * (z - m);
            }
            n += 1;
        }
    }
    assert_eq!(n, 100_000);
    for c in 0..dim {
        let mean = sums[c] / n as f64;
        let std = (squares[c] / n as f64 - mean * mean).sqrt();
        assert!((std - 0.05).abs() < 0.002, "coordinate {c}: std {std}");
        assert!(mean.abs() < 0.001, "coordinate {c}: mean {mean}");
    }
}

#[test]
fn prior_latents_are_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let anchors = sample_anchors(10, 4, 0.05, &mut rng).unwrap();
    let mut values = Vec::new();
    for _ in 0..2000 {
        let lb = sample_latent::<f64, _>(8, 0.25, &anchors, &mut rng).unwrap();
        for i in 0..8 {
            if !lb.from_sub[i] {
                assert!(lb.anchor_index[i].is_none());
                values.extend_from_slice(lb.z.row(i));
            }
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.02 && (var.sqrt() - 1.0).abs() < 0.02, "mean {mean}, std {}", var.sqrt());
}

proptest! {
    #[test]
    fn flagged_count_is_rounded_fraction_with_floor_of_one(batch in 1usize..128, p in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = sample_anchors(3, 2, 0.05, &mut rng).unwrap();
        let lb = sample_latent::<f32, _>(batch, p, &anchors, &mut rng).unwrap();
        let mut expected = (p * batch as f64).round() as usize;
        if p > 0.0 {
            expected = expected.max(1);
        }
        prop_assert_eq!(lb.flagged().len(), expected);
        prop_assert_eq!(sub_count(batch, p), expected);
    }

    #[test]
    fn both_forms_push_in_the_same_direction(fake in -5.0f64..5.0, real in -5.0f64..5.0, d in 0.01f64..1.0) {
        for form in [AdvForm::ScoreDiff, AdvForm::Softplus] {
            let base = adv_loss(&[fake], Some(&[real]), form).unwrap();
            let raised_fake = adv_loss(&[fake + d], Some(&[real]), form).unwrap();
            let raised_real = adv_loss(&[fake], Some(&[real + d]), form).unwrap();
            prop_assert!(raised_fake.loss_g < base.loss_g);
            prop_assert!(raised_fake.loss_d.unwrap() > base.loss_d.unwrap());
            prop_assert!(raised_real.loss_d.unwrap() < base.loss_d.unwrap());
        }
    }
}

fn patch_maps(d: &Discriminator<f32>, images: &Tensor<f32>) -> BTreeMap<usize, Tensor<f32>> {
    let res = d.config().produced_resolutions();
    let mut tape = Tape::new();
    let b = d.params().bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let taps = d.forward(&mut tape, &b, x, &res, None).unwrap().taps;
    let maps = d.patch_scores(&mut tape, &b, &taps, &res).unwrap();
    res.iter().zip(maps).map(|(&r, m)| (r, tape.value(m).clone())).collect()
}

#[test]
fn pixels_outside_a_receptive_field_never_move_that_unit() {
    const PROBES: usize = 100;
    let spec = ModelSpec::default();
    let cfg = spec.discriminator();
    let d = build_discriminator::<f32>(&cfg).unwrap();
    let r = spec.resolution;
    let images = uniform_images::<f32>(1, r, 1);
    let base = patch_maps(&d, &images);
    let resolutions = cfg.produced_resolutions();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut probes = 0;
    while probes < PROBES {
        let res = resolutions[rng.random_range(0..resolutions.len())];
        let rf = cfg.receptive_field(res).unwrap();
        let (uy, ux) = (rng.random_range(0..res), rng.random_range(0..res));
        let ((y0, y1), (x0, x1)) = (rf.span(uy, r), rf.span(ux, r));
        let (py, px, ch) = (rng.random_range(0..r), rng.random_range(0..r), rng.random_range(0..3));
        if (y0..=y1).contains(&py) && (x0..=x1).contains(&px) {
            continue;
        }
        let mut moved = images.clone();
        moved.data_mut()[(ch * r + py) * r + px] += rng.random_range(0.5..2.0);
        let after = patch_maps(&d, &moved);
        let at = |m: &Tensor<f32>| m.data()[uy * res + ux];
        assert_eq!(at(&base[&res]), at(&after[&res]), "unit ({uy},{ux}) at {res}² moved by pixel ({py},{px})");
        probes += 1;
    }
}

/// Extent of the input gradient of one central unit: an empirical receptive field.
fn measured_field(d: &Discriminator<f64>, res: usize) -> (usize, usize) {
    let r = d.config().input_resolution;
    let images = uniform_images::<f64>(1, r, 3);
    let mut tape = Tape::new();
    let b = d.params().bind(&mut tape, false);
    let x = tape.leaf(images, true);
    let taps = d.forward(&mut tape, &b, x, &[res], None).unwrap().taps;
    let map = d.patch_scores(&mut tape, &b, &taps, &[res]).unwrap()[0];
    let u = res / 2;
    let mut pick = vec![0.0; res * res];
    pick[u * res + u] = 1.0;
    let one = tape.mul_const(map, Arc::new(pick)).unwrap();
    let s = tape.mean(one).unwrap();
    let g = tape.backward(s).unwrap().take(x).unwrap();
    let rows: Vec<usize> = (0..r).filter(|&y| (0..3).any(|c| (0..r).any(|xx| g.data()[(c * r + y) * r + xx] != 0.0))).collect();
    (rows[0], *rows.last().unwrap())
}

#[test]
fn receptive_fields_match_gradient_support() {
    let spec = ModelSpec { resolution: 64, d_channels: vec![4, 4, 4, 4], ..ModelSpec::default() };
    let cfg = spec.discriminator();
    let d = build_discriminator::<f64>(&cfg).unwrap();
    for res in cfg.produced_resolutions() {
        let (lo, hi) = measured_field(&d, res);
        let rf = cfg.receptive_field(res).unwrap();
        assert_eq!((lo, hi), rf.span(res / 2, 64), "resolution {res}");
        if lo > 0 && hi < 63 {
            assert_eq!(hi - lo + 1, rf.size);
        }
    }
}

#[test]
fn patch_band_selects_layers_by_measured_field() {
    let spec = ModelSpec::default();
    let cfg = spec.discriminator();
    let d = build_discriminator::<f64>(&cfg.clone()).unwrap();
    let sizes: Vec<(usize, usize)> = cfg
        .produced_resolutions()
        .into_iter()
        .map(|res| {
            let (lo, hi) = measured_field(&d, res);
            (res, hi - lo + 1)
        })
        .collect();
    for band in [(4.0, 8.0), scaled_band(32), (1.0, 32.0)] {
        let expected: Vec<usize> = sizes.iter().filter(|(_, s)| *s as f64 >= band.0 && *s as f64 <= band.1).map(|(r, _)| *r).collect();
        assert_eq!(PatchHeadConfig::select(&cfg, band).unwrap().tap_resolutions, expected, "band {band:?}");
    }
}

#[test]
fn constant_image_gives_a_constant_interior_score_map() {
    let spec = ModelSpec::default();
    let cfg = spec.discriminator();
    let d = build_discriminator::<f32>(&cfg).unwrap();
    let r = spec.resolution;
    let gray = Tensor::full(&[1, 3, r, r], 0.1f32);
    for (res, map) in patch_maps(&d, &gray) {
        let rf = cfg.receptive_field(res).unwrap();
        let interior: Vec<usize> = (0..res)
            .filter(|&u| {
                let lo = rf.offset + (rf.jump * u) as isize;
                lo >= 0 && lo + rf.size as isize <= r as isize
            })
            .collect();
        let values: Vec<f32> = interior.iter().flat_map(|&y| interior.iter().map(move |&x| (y, x))).map(|(y, x)| map.data()[y * res + x]).collect();
        for v in &values {
            assert!((v - values[0]).abs() <= 1e-5 * values[0].abs().max(1.0), "resolution {res}");
        }
    }
}
