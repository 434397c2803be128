#![allow(dead_code)]

use fsgan_core::config::ModelSpec;
use fsgan_core::nets::{build_discriminator, build_generator, ModelPair, ParamSet};
use fsgan_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
/// Fallback steps for coordinates where `FD_STEP` crosses a kink.
pub const FD_STEPS: [f64; 3] = [FD_STEP, 1e-6, 1e-7];
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradient magnitudes below this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

/// A pair small enough for exhaustive finite differences (< 10k parameters per network).
pub fn tiny_spec() -> ModelSpec {
    ModelSpec { latent_dim: 8, resolution: 32, g_channels: vec![6, 4, 4], d_channels: vec![4, 6, 8], seed: 3 }
}

pub fn jitter<T: fsgan_core::Real>(params: &mut ParamSet<T>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = T::from_f64_lossy(v.as_f64() + scale * n);
        }
    }
}

/// Source pair from `spec`, targets jittered away from it.
pub fn perturbed_pair(spec: &ModelSpec, scale: f64, seed: u64) -> ModelPair<f64> {
    let g = build_generator::<f64>(&spec.generator()).unwrap();
    let d = build_discriminator::<f64>(&spec.discriminator()).unwrap();
    let mut pair = ModelPair::from_source(g, d);
    jitter(pair.generator_target.params_mut(), scale, seed);
    jitter(pair.discriminator_target.params_mut(), scale, seed + 1);
    pair
}

pub fn normal_tensor<T: fsgan_core::Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(StandardNormal.sample(&mut rng))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform_images<T: fsgan_core::Real>(n: usize, r: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * r * r).map(|_| T::from_f64_lossy(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(vec![n, 3, r, r], data).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Net {
    Generator,
    Discriminator,
}

fn params_of(pair: &mut ModelPair<f64>, net: Net) -> &mut ParamSet<f64> {
    match net {
        Net::Generator => pair.generator_target.params_mut(),
        Net::Discriminator => pair.discriminator_target.params_mut(),
    }
}

#[derive(Debug)]
pub struct FdReport {
    pub max_rel: f64,
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
    pub significant: usize,
    /// Coordinates where the default step crossed a leaky-ReLU kink and a smaller one was used.
    pub refined: usize,
    /// Coordinates where every step tried crossed a kink; these are not compared.
    pub straddling: usize,
}

/// Central differences of `f` w.r.t. every target parameter of `net`, against `analytic`.
/// `f` returns the loss and the tape's kink signature. A step whose two ends land on
/// different smooth pieces is retried with smaller steps.
pub fn finite_difference_check(
    pair: &ModelPair<f64>,
    net: Net,
    analytic: &[Option<Tensor<f64>>],
    f: impl Fn(&ModelPair<f64>) -> (f64, u64),
) -> FdReport {
    let mut work = pair.clone();
    let count = params_of(&mut work, net).len();
    assert_eq!(analytic.len(), count);
    let mut report = FdReport { max_rel: 0.0, worst: (0, 0, 0.0, 0.0), checked: 0, significant: 0, refined: 0, straddling: 0 };
    for i in 0..count {
        let len = params_of(&mut work, net).tensors()[i].len();
        for j in 0..len {
            let orig = params_of(&mut work, net).tensors()[i].data()[j];
            let mut numeric = None;
            for (attempt, h) in FD_STEPS.iter().enumerate() {
                params_of(&mut work, net).tensors_mut()[i].data_mut()[j] = orig + h;
                let (up, sig_up) = f(&work);
                params_of(&mut work, net).tensors_mut()[i].data_mut()[j] = orig - h;
                let (down, sig_down) = f(&work);
                if sig_up == sig_down {
                    numeric = Some((up - down) / (2.0 * h));
                    report.refined += usize::from(attempt > 0);
                    break;
                }
            }
            params_of(&mut work, net).tensors_mut()[i].data_mut()[j] = orig;
            let Some(numeric) = numeric else {
                report.straddling += 1;
                continue;
            };
            let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[j]);
            let scale = a.abs().max(numeric.abs());
            let rel = (a - numeric).abs() / scale.max(FD_FLOOR);
            if scale > FD_FLOOR {
                report.significant += 1;
            }
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = (i, j, a, numeric);
            }
            report.checked += 1;
        }
    }
    report
}

/// Rows of a batch-major tensor as f64 vectors.
pub fn rows<T: fsgan_core::Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.batch()).map(|i| t.row(i).iter().map(|v| v.as_f64()).collect()).collect()
}

/// Straight-line cosine -> softmax over the other members -> KL(target || source), mean over members.
pub fn oracle_consistency(target: &[Vec<f64>], source: &[Vec<f64>]) -> f64 {
    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for k in 0..a.len() {
            ab += a[k] * b[k];
            aa += a[k] * a[k];
            bb += b[k] * b[k];
        }
        ab / (aa.sqrt() * bb.sqrt())
    }
    fn dist(x: &[Vec<f64>], i: usize) -> Vec<f64> {
        let e: Vec<f64> = (0..x.len()).filter(|&j| j != i).map(|j| cos(&x[i], &x[j]).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }
    let b = target.len();
    let mut total = 0.0;
    for i in 0..b {
        let p = dist(target, i);
        let q = dist(source, i);
        for k in 0..p.len() {
            total += p[k] * (p[k].ln() - q[k].ln());
        }
    }
    total / b as f64
}
