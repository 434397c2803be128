//! Adversarial objective: image-level discrimination restricted to the anchor
//! subspace of latents, patch-level discrimination over the whole latent space,
//! and the samplers that build those latent batches.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{config_err, domain_err, Result};
use crate::masking::BatchMask;
use crate::nets::{Bound, Discriminator, DiscriminatorConfig};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 0.05;
pub const DEFAULT_SUB_FRACTION: f64 = 0.25;
/// Effective patch band at 256² input, in pixels.
pub const REFERENCE_PATCH_BAND: (f64, f64) = (22.0, 61.0);
pub const REFERENCE_RESOLUTION: f64 = 256.0;

/// Fixed latent points defining the few-shot latent subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl AnchorSet {
    pub fn k(&self) -> usize {
        self.anchors.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }
}

pub fn sample_anchors<R: Rng + ?Sized>(k: usize, latent_dim: usize, sigma: f64, rng: &mut R) -> Result<AnchorSet> {
    if k < 1 {
        return Err(domain_err!("anchor count must be >= 1"));
    }
    if !(sigma >= 0.0) {
        return Err(domain_err!("sigma must be nonnegative, got {}", sigma));
    }
    let anchors = (0..k).map(|_| (0..latent_dim).map(|_| StandardNormal.sample(rng)).collect()).collect();
    Ok(AnchorSet { anchors, sigma })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch<T> {
    pub z: Tensor<T>,
    pub from_sub: Vec<bool>,
    pub anchor_index: Vec<Option<usize>>,
}

impl<T: Real> LatentBatch<T> {
    pub fn len(&self) -> usize {
        self.from_sub.len()
    }

    pub fn is_empty(&self) -> bool {
        self.from_sub.is_empty()
    }

    pub fn flagged(&self) -> Vec<usize> {
        self.from_sub.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
    }
}

/// `round(p_sub · B)`, at least one when `p_sub > 0`.
pub fn sub_count(batch: usize, p_sub: f64) -> usize {
    let n = (p_sub * batch as f64).round() as usize;
    if p_sub > 0.0 && batch > 0 {
        n.clamp(1, batch)
    } else {
        n.min(batch)
    }
}

/// Mix anchor-subspace latents (anchor + N(0, σ²)) with prior latents.
pub fn sample_latent<T: Real, R: Rng + ?Sized>(batch: usize, p_sub: f64, anchors: &AnchorSet, rng: &mut R) -> Result<LatentBatch<T>> {
    if !(0.0..=1.0).contains(&p_sub) {
        return Err(domain_err!("subspace fraction must lie in [0, 1], got {}", p_sub));
    }
    if anchors.k() == 0 {
        return Err(domain_err!("empty anchor set"));
    }
    let dim = anchors.latent_dim();
    let n_sub = sub_count(batch, p_sub);
    let mut from_sub = vec![false; batch];
    for i in index::sample(rng, batch, n_sub) {
        from_sub[i] = true;
    }
    let noise = Normal::new(0.0, anchors.sigma).map_err(|e| domain_err!("{e}"))?;
    let mut data = Vec::with_capacity(batch * dim);
    let mut anchor_index = Vec::with_capacity(batch);
    for &flag in &from_sub {
        if flag {
            let a = rng.random_range(0..anchors.k());
            data.extend(anchors.anchors[a].iter().map(|&c| T::from_f64_lossy(c + noise.sample(rng))));
            anchor_index.push(Some(a));
        } else {
            data.extend((0..dim).map(|_| T::from_f64_lossy(StandardNormal.sample(rng))));
            anchor_index.push(None);
        }
    }
    Ok(LatentBatch { z: Tensor::new(vec![batch, dim], data)?, from_sub, anchor_index })
}

/// Prior latents, all eligible for the image-level term.
pub fn sample_prior<T: Real, R: Rng + ?Sized>(batch: usize, latent_dim: usize, rng: &mut R) -> LatentBatch<T> {
    let data = (0..batch * latent_dim).map(|_| T::from_f64_lossy(StandardNormal.sample(rng))).collect();
    LatentBatch {
        z: Tensor::new(vec![batch, latent_dim], data).expect("sized"),
        from_sub: vec![true; batch],
        anchor_index: vec![None; batch],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvForm {
    /// `D(G(z)) − D(x)` for D; `−D(G(z))` for G.
    #[default]
    ScoreDiff,
    /// `softplus(D(G(z))) + softplus(−D(x))` for D; `softplus(−D(G(z)))` for G.
    Softplus,
}

impl std::str::FromStr for AdvForm {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score_diff" => Ok(Self::ScoreDiff),
            "softplus" => Ok(Self::Softplus),
            other => Err(config_err!("adv.form must be score_diff or softplus, got {other}")),
        }
    }
}

impl std::fmt::Display for AdvForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ScoreDiff => "score_diff",
            Self::Softplus => "softplus",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvLosses {
    pub loss_g: f64,
    pub loss_d: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Adversarial losses from raw scores; `real` may be absent for generator-only steps.
pub fn adv_loss(fake: &[f64], real: Option<&[f64]>, form: AdvForm) -> Result<AdvLosses> {
    if fake.is_empty() || real.is_some_and(<[f64]>::is_empty) {
        return Err(domain_err!("adversarial loss needs nonempty score lists"));
    }
    let sp = crate::tensor::softplus::<f64>;
    Ok(match form {
        AdvForm::ScoreDiff => AdvLosses { loss_g: -mean(fake), loss_d: real.map(|r| mean(fake) - mean(r)) },
        AdvForm::Softplus => {
            let fake_d: Vec<f64> = fake.iter().map(|&s| sp(s)).collect();
            let fake_g: Vec<f64> = fake.iter().map(|&s| sp(-s)).collect();
            AdvLosses {
                loss_g: mean(&fake_g),
                loss_d: real.map(|r| mean(&fake_d) + mean(&r.iter().map(|&s| sp(-s)).collect::<Vec<_>>())),
            }
        }
    })
}

fn d_loss_on_tape<T: Real>(tape: &mut Tape<T>, fake: Var, real: Var, form: AdvForm) -> Result<Var> {
    match form {
        AdvForm::ScoreDiff => {
            let f = tape.mean(fake)?;
            let r = tape.mean(real)?;
            tape.sub(f, r)
        }
        AdvForm::Softplus => {
            let sf = tape.softplus(fake);
            let f = tape.mean(sf)?;
            let nr = tape.scale(real, -T::one());
            let sr = tape.softplus(nr);
            let r = tape.mean(sr)?;
            tape.add(f, r)
        }
    }
}

fn g_loss_on_tape<T: Real>(tape: &mut Tape<T>, fake: Var, form: AdvForm) -> Result<Var> {
    let neg = tape.scale(fake, -T::one());
    match form {
        AdvForm::ScoreDiff => tape.mean(neg),
        AdvForm::Softplus => {
            let s = tape.softplus(neg);
            tape.mean(s)
        }
    }
}

/// Discriminator layers whose units act as patch discriminators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchHeadConfig {
    pub tap_resolutions: Vec<usize>,
    pub patch_size_band: (f64, f64),
}

/// The reference patch band rescaled to an input resolution.
pub fn scaled_band(resolution: usize) -> (f64, f64) {
    let s = resolution as f64 / REFERENCE_RESOLUTION;
    (REFERENCE_PATCH_BAND.0 * s, REFERENCE_PATCH_BAND.1 * s)
}

impl PatchHeadConfig {
    /// Select every layer whose receptive field lies inside `band`.
    pub fn select(d: &DiscriminatorConfig, band: (f64, f64)) -> Result<Self> {
        let tap_resolutions: Vec<usize> = d
            .produced_resolutions()
            .into_iter()
            .filter(|&r| {
                let size = d.receptive_field(r).expect("produced").size as f64;
                size >= band.0 && size <= band.1
            })
            .collect();
        if tap_resolutions.is_empty() {
            return Err(config_err!(
                "no discriminator layer has a receptive field in [{:.2}, {:.2}] px; fields: {:?}",
                band.0,
                band.1,
                d.produced_resolutions().iter().map(|&r| (r, d.receptive_field(r).unwrap().size)).collect::<Vec<_>>()
            ));
        }
        Ok(Self { tap_resolutions, patch_size_band: band })
    }

    pub fn validate(&self, d: &DiscriminatorConfig) -> Result<()> {
        if self.tap_resolutions.is_empty() {
            return Err(config_err!("patch head has no taps"));
        }
        for &r in &self.tap_resolutions {
            let rf = d.receptive_field(r).ok_or_else(|| config_err!("no discriminator layer at {}²", r))?;
            let s = rf.size as f64;
            if s < self.patch_size_band.0 || s > self.patch_size_band.1 {
                return Err(config_err!("layer {}² has receptive field {} outside the patch band {:?}", r, rf.size, self.patch_size_band));
            }
        }
        Ok(())
    }
}

/// Per-location score maps at the configured patch layers.
pub fn patch_scores<T: Real>(
    tape: &mut Tape<T>,
    disc: &Discriminator<T>,
    bound: &Bound,
    taps: &BTreeMap<usize, Var>,
    cfg: &PatchHeadConfig,
) -> Result<Vec<Var>> {
    disc.patch_scores(tape, bound, taps, &cfg.tap_resolutions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    /// Flattened discriminator features at the mask layer.
    #[default]
    Features,
    /// Input pixels (image-level masking comparison).
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSettings {
    pub layer: usize,
    pub ratio: f64,
    pub per_sample: bool,
    pub target: MaskTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvSettings {
    pub form: AdvForm,
    pub mask: MaskSettings,
    pub patch: Option<PatchHeadConfig>,
    pub image_level: bool,
}

/// Adversarial terms on a tape. `loss_d` and its parts are present only when
/// real images were supplied.
#[derive(Debug, Clone)]
pub struct CompositeAdv {
    pub loss_g: Option<Var>,
    pub loss_d: Option<Var>,
    pub image_g: f64,
    pub image_d: f64,
    pub patch_g: f64,
    pub patch_d: f64,
    /// Unmasked discriminator taps on all fake images, when computed.
    pub fake_taps: BTreeMap<usize, Var>,
}

fn masked_scores<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    disc: &Discriminator<T>,
    bound: &Bound,
    images: Var,
    mask: &MaskSettings,
    rng: &mut R,
) -> Result<Var> {
    let b = tape.value(images).batch();
    if mask.ratio == 0.0 {
        return Ok(disc.forward(tape, bound, images, &[], None)?.scores);
    }
    match mask.target {
        MaskTarget::Features => {
            let len = disc
                .config()
                .features_at(mask.layer)
                .ok_or_else(|| config_err!("mask layer {}² does not exist", mask.layer))?;
            let bm = BatchMask::sample(mask.layer, len, mask.ratio, b, mask.per_sample, rng)?;
            Ok(disc.forward(tape, bound, images, &[], Some(&bm))?.scores)
        }
        MaskTarget::Pixels => {
            let len = tape.value(images).row_len();
            let bm = BatchMask::sample(0, len, mask.ratio, b, mask.per_sample, rng)?;
            let masked = tape.mul_const(images, Arc::new(bm.indicator::<T>(b)))?;
            Ok(disc.forward(tape, bound, masked, &[], None)?.scores)
        }
    }
}

/// Image-level term on the subspace latents through the masked discriminator,
/// plus the patch-level term on every latent. `fakes` are `G_t(z)` for the
/// whole batch; `extra_taps` are captured from the unmasked pass over them.
#[allow(clippy::too_many_arguments)]
pub fn composite_adv<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    disc: &Discriminator<T>,
    bound: &Bound,
    fakes: Var,
    reals: Option<Var>,
    from_sub: &[bool],
    settings: &AdvSettings,
    extra_taps: &[usize],
    rng: &mut R,
) -> Result<CompositeAdv> {
    let mut out = CompositeAdv {
        loss_g: None,
        loss_d: None,
        image_g: 0.0,
        image_d: 0.0,
        patch_g: 0.0,
        patch_d: 0.0,
        fake_taps: BTreeMap::new(),
    };
    let mut g_terms = Vec::new();
    let mut d_terms = Vec::new();
    let val = |tape: &Tape<T>, v: Var| tape.value(v).item().as_f64();

    if settings.image_level {
        let flagged: Vec<usize> = from_sub.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect();
        if flagged.is_empty() {
            return Err(domain_err!("image-level term enabled but no latent came from the anchor subspace"));
        }
        let sub = if flagged.len() == from_sub.len() { fakes } else { tape.select_rows(fakes, &flagged)? };
        let fs = masked_scores(tape, disc, bound, sub, &settings.mask, rng)?;
        let g = g_loss_on_tape(tape, fs, settings.form)?;
        out.image_g = val(tape, g);
        g_terms.push(g);
        if let Some(r) = reals {
            let rs = masked_scores(tape, disc, bound, r, &settings.mask, rng)?;
            let d = d_loss_on_tape(tape, fs, rs, settings.form)?;
            out.image_d = val(tape, d);
            d_terms.push(d);
        }
    }

    let patch_taps: &[usize] = settings.patch.as_ref().map_or(&[], |p| &p.tap_resolutions);
    let mut wanted: Vec<usize> = patch_taps.iter().chain(extra_taps).copied().collect();
    wanted.sort_unstable();
    wanted.dedup();
    if !wanted.is_empty() {
        out.fake_taps = disc.forward(tape, bound, fakes, &wanted, None)?.taps;
    }
    if let Some(patch) = &settings.patch {
        let fake_maps = patch_scores(tape, disc, bound, &out.fake_taps, patch)?;
        let real_maps = match reals {
            Some(r) => {
                let taps = disc.forward(tape, bound, r, &patch.tap_resolutions, None)?.taps;
                Some(patch_scores(tape, disc, bound, &taps, patch)?)
            }
            None => None,
        };
        let inv = T::one() / T::from_usize(fake_maps.len()).unwrap();
        let mut pg = Vec::new();
        let mut pd = Vec::new();
        for (k, &fm) in fake_maps.iter().enumerate() {
            pg.push(g_loss_on_tape(tape, fm, settings.form)?);
            if let Some(rm) = &real_maps {
                pd.push(d_loss_on_tape(tape, fm, rm[k], settings.form)?);
            }
        }
        let g = tape.sum_scalars(&pg)?.expect("at least one patch tap");
        let g = tape.scale(g, inv);
        out.patch_g = val(tape, g);
        g_terms.push(g);
        if let Some(d) = tape.sum_scalars(&pd)? {
            let d = tape.scale(d, inv);
            out.patch_d = val(tape, d);
            d_terms.push(d);
        }
    }
    out.loss_g = tape.sum_scalars(&g_terms)?;
    out.loss_d = tape.sum_scalars(&d_terms)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn anchors_are_seeded() {
        let a = sample_anchors(10, 8, DEFAULT_SIGMA, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_anchors(10, 8, DEFAULT_SIGMA, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.k(), 10);
        assert!(sample_anchors(0, 8, DEFAULT_SIGMA, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn quarter_of_four_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let anchors = sample_anchors(10, 8, DEFAULT_SIGMA, &mut rng).unwrap();
        let lb = sample_latent::<f32, _>(4, 0.25, &anchors, &mut rng).unwrap();
        assert_eq!(lb.flagged().len(), 1);
        let none = sample_latent::<f32, _>(4, 0.0, &anchors, &mut rng).unwrap();
        assert!(none.flagged().is_empty());
        for b in 1..=64 {
            let lb = sample_latent::<f32, _>(b, 0.25, &anchors, &mut rng).unwrap();
            assert_eq!(lb.flagged().len(), ((0.25 * b as f64).round() as usize).max(1));
        }
    }

    #[test]
    fn one_shot_samples_cluster_around_the_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let anchors = sample_anchors(1, 16, DEFAULT_SIGMA, &mut rng).unwrap();
        let lb = sample_latent::<f64, _>(8, 1.0, &anchors, &mut rng).unwrap();
        for i in 0..8 {
            let d2: f64 = lb.z.row(i).iter().zip(&anchors.anchors[0]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d2.sqrt() < 0.5);
        }
    }

    #[test]
    fn score_cases() {
        let l = adv_loss(&[0.3], Some(&[0.8]), AdvForm::ScoreDiff).unwrap();
        assert!((l.loss_d.unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(adv_loss(&[0.4, 0.1], Some(&[0.4, 0.1]), AdvForm::ScoreDiff).unwrap().loss_d, Some(0.0));
        let s = adv_loss(&[0.0], None, AdvForm::Softplus).unwrap();
        assert!((s.loss_g - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(s.loss_d.is_none());
        assert!(adv_loss(&[], None, AdvForm::Softplus).is_err());
    }

    #[test]
    fn swapping_scores_negates_the_difference_loss() {
        let a = [0.2, -1.0, 3.0];
        let b = [0.5, 0.7];
        let x = adv_loss(&a, Some(&b), AdvForm::ScoreDiff).unwrap().loss_d.unwrap();
        let y = adv_loss(&b, Some(&a), AdvForm::ScoreDiff).unwrap().loss_d.unwrap();
        assert!((x + y).abs() < 1e-15);
    }

    #[test]
    fn patch_band_selection() {
        let d = DiscriminatorConfig::new(32, vec![16, 32, 64], vec![], 0);
        assert_eq!(PatchHeadConfig::select(&d, (4.0, 8.0)).unwrap().tap_resolutions, vec![16]);
        assert_eq!(PatchHeadConfig::select(&d, scaled_band(32)).unwrap().tap_resolutions, vec![16]);
        assert!(matches!(PatchHeadConfig::select(&d, (11.0, 20.0)), Err(crate::Error::Config(_))));
    }
}
