//! Analytic gradients against central finite differences in double precision.

mod common;

use common::*;
use fsgan_core::adversarial::{
    composite_adv, sample_latent, scaled_band, AdvForm, AdvSettings, MaskSettings, MaskTarget, PatchHeadConfig,
};
use fsgan_core::autograd::{Grads, Tape};
use fsgan_core::config::TrainConfig;
use fsgan_core::consistency::{discriminator_cdc_on_tape, generator_cdc_on_tape, source_discriminator_taps};
use fsgan_core::nets::{Bound, FeatureTapSet, ModelPair, Network};
use fsgan_core::trainer::{discriminator_objective, generator_objective, RunKind, TrainState};
use fsgan_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn collect(grads: &mut Grads<f64>, bound: &Bound) -> Vec<Option<Tensor<f64>>> {
    bound.vars.iter().map(|&v| grads.take(v)).collect()
}

fn assert_close(what: &str, r: &FdReport) {
    println!(
        "{what}: max rel err {:.3e} over {} coords ({} significant, {} refined, {} straddling a kink), worst {:?}",
        r.max_rel, r.checked, r.significant, r.refined, r.straddling, r.worst
    );
    assert!(r.significant > r.checked / 4, "{what}: too few informative coordinates: {r:?}");
    assert!(r.straddling * 20 < r.checked, "{what}: too many kink crossings: {r:?}");
    assert!(r.max_rel <= FD_TOLERANCE, "{what}: {r:?}");
}

#[test]
fn tiny_models_stay_under_ten_thousand_parameters() {
    let pair = perturbed_pair(&tiny_spec(), 0.0, 0);
    assert!(pair.generator_target.params().scalar_count() <= 10_000);
    assert!(pair.discriminator_target.params().scalar_count() <= 10_000);
}

#[test]
fn generator_consistency_gradient() {
    let spec = tiny_spec();
    let pair = perturbed_pair(&spec, 0.05, 11);
    let z = normal_tensor::<f64>(&[4, spec.latent_dim], 5);
    let taps = FeatureTapSet::defaults(&spec.generator(), &spec.discriminator()).generator_taps;

    let eval = |p: &ModelPair<f64>| {
        let mut tape = Tape::new();
        let gb = p.generator_target.params().bind(&mut tape, true);
        let zv = tape.constant(z.clone());
        let term = generator_cdc_on_tape(&mut tape, p, &gb, zv, &taps).unwrap();
        (tape, gb, term)
    };
    let (tape, gb, term) = eval(&pair);
    assert!(term.value > 1e-6);
    let analytic = collect(&mut tape.backward(term.loss).unwrap(), &gb);

    let r = finite_difference_check(&pair, Net::Generator, &analytic, |p| {
        let (tape, _, term) = eval(p);
        (term.value, tape.kink_signature())
    });
    assert_close("generator consistency wrt G_t", &r);
}

#[test]
fn discriminator_consistency_gradient_reaches_both_networks() {
    let spec = tiny_spec();
    let pair = perturbed_pair(&spec, 0.05, 21);
    let z = normal_tensor::<f64>(&[4, spec.latent_dim], 6);
    let taps = FeatureTapSet::defaults(&spec.generator(), &spec.discriminator()).discriminator_taps;

    let eval = |p: &ModelPair<f64>| {
        let mut tape = Tape::new();
        let gb = p.generator_target.params().bind(&mut tape, true);
        let db = p.discriminator_target.params().bind(&mut tape, true);
        let zv = tape.constant(z.clone());
        let img = p.generator_target.forward(&mut tape, &gb, zv, &[]).unwrap().images;
        let term = discriminator_cdc_on_tape(&mut tape, p, &db, img, &z, &taps).unwrap();
        (tape, gb, db, term)
    };
    let (tape, gb, db, term) = eval(&pair);
    assert!(term.value > 1e-6);
    let mut grads = tape.backward(term.loss).unwrap();
    let (ag, ad) = (collect(&mut grads, &gb), collect(&mut grads, &db));

    let f = |p: &ModelPair<f64>| {
        let (tape, _, _, term) = eval(p);
        (term.value, tape.kink_signature())
    };
    assert_close("discriminator consistency wrt D_t", &finite_difference_check(&pair, Net::Discriminator, &ad, f));
    assert_close("discriminator consistency wrt G_t", &finite_difference_check(&pair, Net::Generator, &ag, f));
}

fn settings(form: AdvForm, target: MaskTarget) -> AdvSettings {
    let spec = tiny_spec();
    AdvSettings {
        form,
        mask: MaskSettings { layer: 4, ratio: 0.5, per_sample: true, target },
        patch: Some(PatchHeadConfig::select(&spec.discriminator(), scaled_band(spec.resolution)).unwrap()),
        image_level: true,
    }
}

const FLAGS: [bool; 4] = [true, false, true, false];
const MASK_SEED: u64 = 9;

/// `loss_d` with D_t trainable when `train_d`, else `loss_g` with G_t trainable.
fn composite_value(
    pair: &ModelPair<f64>,
    z: &Tensor<f64>,
    reals: &Tensor<f64>,
    s: &AdvSettings,
    train_d: bool,
) -> ((f64, u64), Vec<Option<Tensor<f64>>>) {
    let mut tape = Tape::new();
    let gb = pair.generator_target.params().bind(&mut tape, !train_d);
    let db = pair.discriminator_target.params().bind(&mut tape, train_d);
    let zv = tape.constant(z.clone());
    let fakes = pair.generator_target.forward(&mut tape, &gb, zv, &[]).unwrap().images;
    let real = train_d.then(|| tape.constant(reals.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(MASK_SEED);
    let adv = composite_adv(&mut tape, &pair.discriminator_target, &db, fakes, real, &FLAGS, s, &[], &mut rng).unwrap();
    let loss = if train_d { adv.loss_d.unwrap() } else { adv.loss_g.unwrap() };
    let value = (tape.value(loss).item(), tape.kink_signature());
    let mut grads = tape.backward(loss).unwrap();
    (value, collect(&mut grads, if train_d { &db } else { &gb }))
}

#[test]
fn composite_adversarial_gradient_discriminator_side() {
    let spec = tiny_spec();
    let pair = perturbed_pair(&spec, 0.02, 31);
    let z = normal_tensor::<f64>(&[4, spec.latent_dim], 7);
    let reals = uniform_images::<f64>(4, spec.resolution, 8);
    for form in [AdvForm::ScoreDiff, AdvForm::Softplus] {
        let s = settings(form, MaskTarget::Features);
        let (_, analytic) = composite_value(&pair, &z, &reals, &s, true);
        let r = finite_difference_check(&pair, Net::Discriminator, &analytic, |p| composite_value(p, &z, &reals, &s, true).0);
        assert_close(&format!("composite loss_d ({form}) wrt D_t"), &r);
    }
}

#[test]
fn composite_adversarial_gradient_generator_side() {
    let spec = tiny_spec();
    let pair = perturbed_pair(&spec, 0.02, 41);
    let z = normal_tensor::<f64>(&[4, spec.latent_dim], 9);
    let reals = uniform_images::<f64>(4, spec.resolution, 10);
    for (form, target) in [(AdvForm::Softplus, MaskTarget::Features), (AdvForm::ScoreDiff, MaskTarget::Pixels)] {
        let s = settings(form, target);
        let (_, analytic) = composite_value(&pair, &z, &reals, &s, false);
        let r = finite_difference_check(&pair, Net::Generator, &analytic, |p| composite_value(p, &z, &reals, &s, false).0);
        assert_close(&format!("composite loss_g ({form}, {target:?} mask) wrt G_t"), &r);
    }
}

fn adapt_state(seed: u64) -> TrainState<f64> {
    let spec = tiny_spec();
    let pair = perturbed_pair(&spec, 0.03, seed);
    TrainState::new(RunKind::Adapt, spec, TrainConfig::default(), pair).unwrap()
}

#[test]
fn total_generator_objective_gradient() {
    let mut state = adapt_state(51);
    let latents = state.sample_latents().unwrap();
    let src = source_discriminator_taps(&state.pair, &latents.z, &state.taps.discriminator_taps).unwrap();

    let eval = |s: &TrainState<f64>, backward: bool| {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(MASK_SEED);
        let g = generator_objective(&mut tape, s, &latents, Some(&src), &mut rng).unwrap();
        assert!(g.cdc_g > 1e-6 && g.cdc_d > 1e-6);
        let v = (tape.value(g.loss).item(), tape.kink_signature());
        let grads = backward.then(|| collect(&mut tape.backward(g.loss).unwrap(), &g.bound));
        (v, grads)
    };
    let analytic = eval(&state, true).1.unwrap();
    let r = finite_difference_check(&state.pair, Net::Generator, &analytic, |p| {
        let mut s = state.clone();
        s.pair = p.clone();
        eval(&s, false).0
    });
    assert_close("total generator objective wrt G_t", &r);
}

#[test]
fn total_discriminator_objective_gradient() {
    let mut state = adapt_state(61);
    let latents = state.sample_latents().unwrap();
    let reals = uniform_images::<f64>(4, 32, 12);
    let src = source_discriminator_taps(&state.pair, &latents.z, &state.taps.discriminator_taps).unwrap();

    let eval = |s: &TrainState<f64>, backward: bool| {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(MASK_SEED);
        let d = discriminator_objective(&mut tape, s, &reals, &latents, Some(&src), &mut rng).unwrap();
        assert!(d.cdc_d > 1e-6);
        let v = (tape.value(d.loss).item(), tape.kink_signature());
        let grads = backward.then(|| collect(&mut tape.backward(d.loss).unwrap(), &d.bound));
        (v, grads)
    };
    let analytic = eval(&state, true).1.unwrap();
    let r = finite_difference_check(&state.pair, Net::Discriminator, &analytic, |p| {
        let mut s = state.clone();
        s.pair = p.clone();
        eval(&s, false).0
    });
    assert_close("total discriminator objective wrt D_t", &r);
}

#[test]
fn fully_masked_image_term_gives_the_generator_no_gradient() {
    let spec = tiny_spec();
    let pair = perturbed_pair(&spec, 0.02, 71);
    let z = normal_tensor::<f64>(&[4, spec.latent_dim], 13);
    let mut s = settings(AdvForm::ScoreDiff, MaskTarget::Features);
    s.mask.ratio = 1.0;
    s.patch = None;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let latents = sample_latent::<f64, _>(4, 1.0, &fsgan_core::adversarial::sample_anchors(2, 8, 0.05, &mut rng).unwrap(), &mut rng).unwrap();
    let mut tape = Tape::new();
    let gb = pair.generator_target.params().bind(&mut tape, true);
    let db = pair.discriminator_target.params().bind(&mut tape, false);
    let zv = tape.constant(z);
    let fakes = pair.generator_target.forward(&mut tape, &gb, zv, &[]).unwrap().images;
    let adv = composite_adv(&mut tape, &pair.discriminator_target, &db, fakes, None, &latents.from_sub, &s, &[], &mut rng).unwrap();
    let grads = collect(&mut tape.backward(adv.loss_g.unwrap()).unwrap(), &gb);
    for g in grads.iter().flatten() {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
