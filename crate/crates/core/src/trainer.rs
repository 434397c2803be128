//! Source pretraining and few-shot adaptation.
//!
//! Each iteration takes one discriminator step and then one generator step on
//! the same latent batch. The discriminator minimises the composite
//! adversarial loss plus `λ_d · L_dist(D_s, D_t)`; the generator minimises its
//! adversarial loss plus `λ_g · L_dist(G_s, G_t) + λ_d · L_dist(D_s, D_t)`, the
//! last term reaching `G_t` through `D_t(G_t(z))` unless detached.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    composite_adv, sample_anchors, sample_latent, sample_prior, scaled_band, AdvSettings, AnchorSet, LatentBatch,
    PatchHeadConfig,
};
use crate::autograd::{Tape, Var};
use crate::config::{ModelSpec, TrainConfig};
use crate::consistency::{cdc_from_taps, source_discriminator_taps};
use crate::data::ImageDataset;
use crate::error::{config_err, Error, Result};
use crate::nets::{build_discriminator, build_generator, Bound, FeatureTapSet, ModelPair, Network, ParamSet};
use crate::optim::Adam;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MIN_PRETRAIN_IMAGES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Pretrain,
    Adapt,
}

/// Losses of one iteration. `adv_img`, `adv_patch` and `cdc_g` come from the
/// generator step, `cdc_d` from the discriminator step (both evaluated before
/// that step's update).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub adv_img: f64,
    pub adv_patch: f64,
    pub cdc_g: f64,
    pub cdc_d: f64,
    pub total: f64,
    pub d_adv_img: f64,
    pub d_adv_patch: f64,
    pub d_total: f64,
    /// The discriminator consistency value seen by the generator step.
    pub cdc_d_in_g: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        [self.adv_img, self.adv_patch, self.cdc_g, self.cdc_d, self.total, self.d_adv_img, self.d_adv_patch, self.d_total, self.cdc_d_in_g]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub kind: RunKind,
    pub model: ModelSpec,
    pub config: TrainConfig,
    pub pair: ModelPair<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub anchors: AnchorSet,
    pub taps: FeatureTapSet,
    pub patch: Option<PatchHeadConfig>,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub records: Vec<LossRecord>,
}

fn resolve_taps(model: &ModelSpec, cfg: &TrainConfig) -> Result<FeatureTapSet> {
    let (g, d) = (model.generator(), model.discriminator());
    let defaults = FeatureTapSet::defaults(&g, &d);
    let taps = FeatureTapSet {
        generator_taps: cfg.generator_taps.clone().unwrap_or(defaults.generator_taps),
        discriminator_taps: cfg.discriminator_taps.clone().unwrap_or(defaults.discriminator_taps),
    };
    taps.validate(&g, &d)?;
    Ok(taps)
}

fn resolve_patch(model: &ModelSpec, cfg: &TrainConfig) -> Result<Option<PatchHeadConfig>> {
    if !cfg.patch.enabled {
        return Ok(None);
    }
    let band = cfg.patch.band.unwrap_or_else(|| scaled_band(model.resolution));
    PatchHeadConfig::select(&model.discriminator(), band).map(Some)
}

impl<T: Real> TrainState<T> {
    /// Fresh state around an existing pair; anchors are drawn here, once.
    pub fn new(kind: RunKind, model: ModelSpec, config: TrainConfig, pair: ModelPair<T>) -> Result<Self> {
        config.validate()?;
        let taps = resolve_taps(&model, &config)?;
        let patch = resolve_patch(&model, &config)?;
        let d = model.discriminator();
        if config.mask.ratio > 0.0 && d.features_at(config.mask.layer).is_none() {
            return Err(config_err!("mask.layer {}² does not exist; available: {:?}", config.mask.layer, d.produced_resolutions()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let anchors = sample_anchors(config.zsub.k, model.latent_dim, config.zsub.sigma, &mut rng)?;
        Ok(Self {
            kind,
            opt_g: Adam::new(config.optimizer, pair.generator_target.params()),
            opt_d: Adam::new(config.optimizer, pair.discriminator_target.params()),
            model,
            config,
            pair,
            anchors,
            taps,
            patch,
            rng,
            iteration: 0,
            records: Vec::new(),
        })
    }

    pub fn adv_settings(&self) -> AdvSettings {
        AdvSettings { form: self.config.adv_form, mask: self.config.mask.clone(), patch: self.patch.clone(), image_level: true }
    }

    /// Latents for one iteration. With the patch term off every latent faces
    /// the image-level discriminator, so they come from the prior.
    pub fn sample_latents(&mut self) -> Result<LatentBatch<T>> {
        let b = self.config.batch_size;
        if self.patch.is_none() {
            Ok(sample_prior(b, self.model.latent_dim, &mut self.rng))
        } else {
            sample_latent(b, self.config.zsub.p, &self.anchors, &mut self.rng)
        }
    }
}

fn collect_grads<T: Real>(grads: &mut crate::autograd::Grads<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
    bound.vars.iter().map(|&v| grads.take(v)).collect()
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().as_f64()
}

/// Discriminator objective on a tape with `D_t` bound trainable.
pub struct DiscriminatorObjective {
    pub bound: Bound,
    pub loss: Var,
    pub adv_img: f64,
    pub adv_patch: f64,
    pub cdc_d: f64,
}

/// Build the discriminator-step objective. `rng` drives mask sampling.
pub fn discriminator_objective<T: Real, R: rand::Rng + ?Sized>(
    tape: &mut Tape<T>,
    state: &TrainState<T>,
    reals: &Tensor<T>,
    latents: &LatentBatch<T>,
    source_d_taps: Option<&BTreeMap<usize, Tensor<T>>>,
    rng: &mut R,
) -> Result<DiscriminatorObjective> {
    let pair = &state.pair;
    let fakes = pair.generator_target.generate(&latents.z)?;
    let bound = pair.discriminator_target.params().bind(tape, true);
    let fv = tape.constant(fakes);
    let rv = tape.constant(reals.clone());
    let lambda_d = state.config.lambda_d;
    let extra: &[usize] = if lambda_d > 0.0 { &state.taps.discriminator_taps } else { &[] };
    let adv = composite_adv(tape, &pair.discriminator_target, &bound, fv, Some(rv), &latents.from_sub, &state.adv_settings(), extra, rng)?;
    let mut loss = adv.loss_d.ok_or_else(|| config_err!("no discriminator loss terms enabled"))?;
    let mut cdc_d = 0.0;
    if lambda_d > 0.0 {
        let src = source_d_taps.ok_or_else(|| config_err!("discriminator consistency needs source activations"))?;
        let term = cdc_from_taps(tape, &adv.fake_taps, src, &state.taps.discriminator_taps)?;
        cdc_d = term.value;
        let weighted = tape.scale(term.loss, T::from_f64_lossy(lambda_d));
        loss = tape.add(loss, weighted)?;
    }
    Ok(DiscriminatorObjective { bound, loss, adv_img: adv.image_d, adv_patch: adv.patch_d, cdc_d })
}

/// Generator objective on a tape with `G_t` bound trainable and `D_t` frozen.
pub struct GeneratorObjective {
    pub bound: Bound,
    pub loss: Var,
    pub adv_img: f64,
    pub adv_patch: f64,
    pub cdc_g: f64,
    pub cdc_d: f64,
}

pub fn generator_objective<T: Real, R: rand::Rng + ?Sized>(
    tape: &mut Tape<T>,
    state: &TrainState<T>,
    latents: &LatentBatch<T>,
    source_d_taps: Option<&BTreeMap<usize, Tensor<T>>>,
    rng: &mut R,
) -> Result<GeneratorObjective> {
    let pair = &state.pair;
    let cfg = &state.config;
    let gb = pair.generator_target.params().bind(tape, true);
    let db = pair.discriminator_target.params().bind(tape, false);
    let z = tape.constant(latents.z.clone());
    let g_taps: &[usize] = if cfg.lambda_g > 0.0 { &state.taps.generator_taps } else { &[] };
    let out = pair.generator_target.forward(tape, &gb, z, g_taps)?;
    let use_d_cdc = cfg.lambda_d > 0.0 && !cfg.detach_d_in_g;
    let extra: &[usize] = if use_d_cdc { &state.taps.discriminator_taps } else { &[] };
    let adv = composite_adv(tape, &pair.discriminator_target, &db, out.images, None, &latents.from_sub, &state.adv_settings(), extra, rng)?;
    let mut loss = adv.loss_g.ok_or_else(|| config_err!("no generator loss terms enabled"))?;
    let mut cdc_g = 0.0;
    if cfg.lambda_g > 0.0 {
        let source = {
            let mut st = Tape::new();
            let b = pair.generator_source.bind(&mut st);
            let zs = st.constant(latents.z.clone());
            let o = pair.generator_source.forward(&mut st, &b, zs, g_taps)?;
            o.taps.iter().map(|(&k, &v)| (k, st.value(v).clone())).collect::<BTreeMap<_, _>>()
        };
        let term = cdc_from_taps(tape, &out.taps, &source, g_taps)?;
        cdc_g = term.value;
        let w = tape.scale(term.loss, T::from_f64_lossy(cfg.lambda_g));
        loss = tape.add(loss, w)?;
    }
    let mut cdc_d = 0.0;
    if use_d_cdc {
        let src = source_d_taps.ok_or_else(|| config_err!("discriminator consistency needs source activations"))?;
        let term = cdc_from_taps(tape, &adv.fake_taps, src, &state.taps.discriminator_taps)?;
        cdc_d = term.value;
        let w = tape.scale(term.loss, T::from_f64_lossy(cfg.lambda_d));
        loss = tape.add(loss, w)?;
    }
    Ok(GeneratorObjective { bound: gb, loss, adv_img: adv.image_g, adv_patch: adv.patch_g, cdc_g, cdc_d })
}

/// One D step then one G step on `latents`; appends and returns the loss record.
pub fn training_step<T: Real>(state: &mut TrainState<T>, reals: &Tensor<T>, latents: &LatentBatch<T>) -> Result<LossRecord> {
    let it = state.iteration;
    let source_d = if state.config.lambda_d > 0.0 {
        Some(source_discriminator_taps(&state.pair, &latents.z, &state.taps.discriminator_taps)?)
    } else {
        None
    };
    let mut rng = state.rng.clone();

    let mut tape = Tape::new();
    let d = discriminator_objective(&mut tape, state, reals, latents, source_d.as_ref(), &mut rng)?;
    let d_total = scalar(&tape, d.loss);
    if !d_total.is_finite() {
        return Err(Error::NonFinite { iteration: it, detail: format!("discriminator loss {d_total}") });
    }
    let mut grads = tape.backward(d.loss)?;
    let dg = collect_grads(&mut grads, &d.bound);
    drop(tape);
    state.opt_d.update(state.pair.discriminator_target.params_mut(), &dg)?;

    let mut tape = Tape::new();
    let g = generator_objective(&mut tape, state, latents, source_d.as_ref(), &mut rng)?;
    let g_total = scalar(&tape, g.loss);
    let cfg = &state.config;
    let record = LossRecord {
        iteration: it,
        adv_img: g.adv_img,
        adv_patch: g.adv_patch,
        cdc_g: g.cdc_g,
        cdc_d: d.cdc_d,
        total: g.adv_img + g.adv_patch + cfg.lambda_g * g.cdc_g + cfg.lambda_d * d.cdc_d,
        d_adv_img: d.adv_img,
        d_adv_patch: d.adv_patch,
        d_total,
        cdc_d_in_g: g.cdc_d,
    };
    if !g_total.is_finite() || !record.is_finite() {
        return Err(Error::NonFinite { iteration: it, detail: format!("{record:?}") });
    }
    let mut grads = tape.backward(g.loss)?;
    let gg = collect_grads(&mut grads, &g.bound);
    drop(tape);
    state.opt_g.update(state.pair.generator_target.params_mut(), &gg)?;

    state.rng = rng;
    state.iteration += 1;
    state.records.push(record);
    Ok(record)
}

/// Run until `state.config.iterations`, drawing real batches from `data`.
/// `on_iteration` sees every state after its step (for logging or checkpoints).
pub fn run<T: Real>(
    state: &mut TrainState<T>,
    data: &ImageDataset,
    mut on_iteration: impl FnMut(&TrainState<T>) -> Result<()>,
) -> Result<()> {
    while state.iteration < state.config.iterations {
        let latents = state.sample_latents()?;
        let reals: Tensor<T> = data.sample_batch(state.config.batch_size, &mut state.rng);
        let rec = training_step(state, &reals, &latents)?;
        if state.config.log_every > 0 && (rec.iteration + 1) % state.config.log_every == 0 {
            log::info!(
                "iter {:>6}  g_adv {:.4}+{:.4}  cdc_g {:.3e}  cdc_d {:.3e}  d_total {:.4}",
                rec.iteration + 1,
                rec.adv_img,
                rec.adv_patch,
                rec.cdc_g,
                rec.cdc_d,
                rec.d_total
            );
        }
        on_iteration(state)?;
    }
    Ok(())
}

/// Plain GAN training of a fresh pair on a large source dataset.
pub fn pretrain(data: &ImageDataset, model: &ModelSpec, config: &TrainConfig) -> Result<TrainState<f32>> {
    if data.len() < MIN_PRETRAIN_IMAGES {
        return Err(config_err!(
            "pretraining needs at least {} source images, got {}; generate a larger synthetic domain or point at a bigger directory",
            MIN_PRETRAIN_IMAGES,
            data.len()
        ));
    }
    if data.resolution != model.resolution {
        return Err(config_err!("dataset resolution {} does not match model resolution {}", data.resolution, model.resolution));
    }
    let mut cfg = config.clone();
    cfg.lambda_g = 0.0;
    cfg.lambda_d = 0.0;
    cfg.mask.ratio = 0.0;
    cfg.zsub.p = 1.0;
    cfg.patch.enabled = false;
    let g = build_generator::<f32>(&model.generator())?;
    let d = build_discriminator::<f32>(&model.discriminator())?;
    let mut state = TrainState::new(RunKind::Pretrain, model.clone(), cfg, ModelPair::from_source(g, d))?;
    run(&mut state, data, |_| Ok(()))?;
    Ok(state)
}

/// Start an adaptation from source networks: targets are copies, sources frozen.
pub fn start_adaptation(
    model: &ModelSpec,
    generator: ParamSet<f32>,
    discriminator: ParamSet<f32>,
    config: &TrainConfig,
    shots: usize,
) -> Result<TrainState<f32>> {
    if shots != config.zsub.k {
        return Err(config_err!("target set has {} images but zsub.k = {}; they must match", shots, config.zsub.k));
    }
    let mut g = build_generator::<f32>(&model.generator())?;
    g.params_mut().load(generator.tensors().to_vec())?;
    let mut d = build_discriminator::<f32>(&model.discriminator())?;
    d.params_mut().load(discriminator.tensors().to_vec())?;
    TrainState::new(RunKind::Adapt, model.clone(), config.clone(), ModelPair::from_source(g, d))
}
