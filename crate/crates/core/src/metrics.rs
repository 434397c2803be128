//! Perceptual diversity within nearest-training-sample clusters, and a
//! Fréchet distance on features of a fixed random convolutional extractor.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::nets::{Generator, LEAKY_SLOPE};
use crate::tensor::{self, Tensor};

pub const EXTRACTOR_SEED: u64 = 0x5eed_1e75;
pub const EXTRACTOR_CHANNELS: [usize; 3] = [8, 16, 32];
pub const FID_EPSILON: f64 = 1e-6;
pub const DEFAULT_N_GENERATED: usize = 1000;
const CHUNK: usize = 100;

/// Three conv3x3 + leaky-ReLU stages, the last two preceded by 2× average pooling.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layers: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let layers = EXTRACTOR_CHANNELS
            .iter()
            .map(|&c_out| {
                let std = (2.0 / (9 * c_in) as f64).sqrt();
                let w: Vec<f32> = (0..c_out * c_in * 9)
                    .map(|_| {
                        let s: f64 = StandardNormal.sample(&mut rng);
                        (std * s) as f32
                    })
                    .collect();
                let layer = (Tensor::new(vec![c_out, c_in, 3, 3], w).expect("shape"), Tensor::zeros(&[c_out]));
                c_in = c_out;
                layer
            })
            .collect();
        Self { layers }
    }

    /// The shared instance used by every metric.
    pub fn shared() -> &'static Self {
        static CELL: OnceLock<FeatureExtractor> = OnceLock::new();
        CELL.get_or_init(|| Self::new(EXTRACTOR_SEED))
    }

    /// Activations at each depth for a batch (N, 3, R, R).
    pub fn activations(&self, images: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] || !s[2].is_multiple_of(4) {
            return Err(shape_err!("extractor expects (N, 3, R, R) with R divisible by 4, got {:?}", s));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut x = images.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tensor::avg_pool2(&x)?;
            }
            x = tensor::conv2d(&x, w, b)?.map(|v| tensor::leaky_relu(v, LEAKY_SLOPE as f32));
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Per-image embedding whose squared Euclidean distance is the perceptual distance:
    /// channel vectors unit-normalised at each position, then weighted so every depth
    /// contributes the mean over its positions, averaged over depths.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let n = images.batch();
        let mut rows = vec![Vec::new(); n];
        for chunk_start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (chunk_start..(chunk_start + CHUNK).min(n)).collect();
            let acts = self.activations(&images.select_rows(&idx))?;
            for act in &acts {
                let (c, hw) = (act.shape()[1], act.shape()[2] * act.shape()[3]);
                let weight = (1.0 / (hw * acts.len()) as f64).sqrt();
                for (local, &i) in idx.iter().enumerate() {
                    let a = act.row(local);
                    for p in 0..hw {
                        let norm = (0..c).map(|k| (a[k * hw + p] as f64).powi(2)).sum::<f64>().sqrt() + 1e-10;
                        rows[i].extend((0..c).map(|k| a[k * hw + p] as f64 / norm * weight));
                    }
                }
            }
        }
        Ok(rows)
    }

    /// Spatially averaged activations of every depth, concatenated.
    pub fn pooled(&self, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let n = images.batch();
        let mut rows = vec![Vec::new(); n];
        for chunk_start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (chunk_start..(chunk_start + CHUNK).min(n)).collect();
            for act in self.activations(&images.select_rows(&idx))? {
                let (c, hw) = (act.shape()[1], act.shape()[2] * act.shape()[3]);
                for (local, &i) in idx.iter().enumerate() {
                    let a = act.row(local);
                    rows[i].extend((0..c).map(|k| a[k * hw..(k + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64));
                }
            }
        }
        Ok(rows)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn as_batch(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    match img.shape().len() {
        3 => img.clone().reshape(&[1, img.shape()[0], img.shape()[1], img.shape()[2]]),
        4 if img.batch() == 1 => Ok(img.clone()),
        _ => Err(shape_err!("expected one image (3, R, R), got {:?}", img.shape())),
    }
}

/// Distance between two images (3, R, R) in [−1, 1].
pub fn perceptual_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (a, b) = (as_batch(a)?, as_batch(b)?);
    if a.shape() != b.shape() {
        return Err(shape_err!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let ex = FeatureExtractor::shared();
    let (ea, eb) = (ex.embed(&a)?, ex.embed(&b)?);
    Ok(squared_distance(&ea[0], &eb[0]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Index of the nearest training sample for every generated image.
    pub cluster_of: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

/// Nearest training sample per generated embedding; ties go to the lower index.
pub fn assign_clusters(generated: &[Vec<f64>], training: &[Vec<f64>]) -> ClusterAssignment {
    let mut members = vec![Vec::new(); training.len()];
    let cluster_of = generated
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut best = (f64::INFINITY, 0);
            for (j, t) in training.iter().enumerate() {
                let d = squared_distance(g, t);
                if d < best.0 {
                    best = (d, j);
                }
            }
            members[best.1].push(i);
            best.1
        })
        .collect();
    ClusterAssignment { cluster_of, members }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub intra_diversity: f64,
    /// Standard deviation of the per-cluster values.
    pub std: f64,
    pub per_cluster: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    /// Clusters with fewer than two members; they contribute 0.
    pub undersized: Vec<usize>,
    pub n_generated: usize,
    pub k: usize,
    pub assignment: ClusterAssignment,
}

/// Anything that can produce `n` images from a seed.
pub trait ImageSampler {
    fn resolution(&self) -> usize;
    fn sample(&self, n: usize, seed: u64) -> Result<Tensor<f32>>;
}

/// The fixed latent bank for `seed`.
pub fn fixed_noise(n: usize, latent_dim: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![n, latent_dim], data).expect("shape")
}

impl ImageSampler for Generator<f32> {
    fn resolution(&self) -> usize {
        self.config().output_resolution
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Tensor<f32>> {
        let z = fixed_noise(n, self.config().latent_dim, seed);
        let parts = (0..n)
            .step_by(CHUNK)
            .map(|s| self.generate(&z.select_rows(&(s..(s + CHUNK).min(n)).collect::<Vec<_>>())))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Diversity of already generated images against the `training` set.
pub fn diversity_of_images(generated: &Tensor<f32>, training: &Tensor<f32>) -> Result<DiversityReport> {
    let (n, k) = (generated.batch(), training.batch());
    if k == 0 {
        return Err(domain_err!("need at least one training sample"));
    }
    if n < k {
        return Err(domain_err!("n_generated ({n}) must be >= k ({k})"));
    }
    if generated.shape()[1..] != training.shape()[1..] {
        return Err(shape_err!("generated {:?} vs training {:?}", generated.shape(), training.shape()));
    }
    let ex = FeatureExtractor::shared();
    let (eg, et) = (ex.embed(generated)?, ex.embed(training)?);
    let assignment = assign_clusters(&eg, &et);
    let mut per_cluster = Vec::with_capacity(k);
    let mut undersized = Vec::new();
    for (c, members) in assignment.members.iter().enumerate() {
        if members.len() < 2 {
            undersized.push(c);
            per_cluster.push(0.0);
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += squared_distance(&eg[i], &eg[j]);
                pairs += 1;
            }
        }
        per_cluster.push(sum / pairs as f64);
    }
    let (intra_diversity, std) = mean_std(&per_cluster);
    Ok(DiversityReport {
        intra_diversity,
        std,
        cluster_sizes: assignment.members.iter().map(Vec::len).collect(),
        per_cluster,
        undersized,
        n_generated: n,
        k,
        assignment,
    })
}

/// Generate `n` images from fixed noise under `seed` and measure their diversity.
pub fn intra_diversity(sampler: &impl ImageSampler, training: &Tensor<f32>, n: usize, seed: u64) -> Result<DiversityReport> {
    if training.shape().len() != 4 || training.shape()[2] != sampler.resolution() {
        return Err(shape_err!("training samples {:?} do not match generator resolution {}", training.shape(), sampler.resolution()));
    }
    if n < training.batch() {
        return Err(domain_err!("n_generated ({n}) must be >= k ({})", training.batch()));
    }
    diversity_of_images(&sampler.sample(n, seed)?, training)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub value: f64,
    pub epsilon: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub feature_dim: usize,
}

fn moments(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (rows.len(), rows[0].len());
    let mut mu = DVector::zeros(d);
    for r in rows {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * s * e.eigenvectors.transpose()
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sym_sqrt(a);
    let m = &ra * b * &ra;
    SymmetricEigen::new((&m + m.transpose()) * 0.5).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// ‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2}), with `epsilon`·I added to both covariances.
/// The cross term is averaged over both orderings so the result is exactly symmetric.
pub fn frechet_distance(mu1: &[f64], cov1: &DMatrix<f64>, mu2: &[f64], cov2: &DMatrix<f64>, epsilon: f64) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(shape_err!("moment dimensions disagree: {d}, {}, {:?}, {:?}", mu2.len(), cov1.shape(), cov2.shape()));
    }
    let reg = DMatrix::identity(d, d) * epsilon;
    let (c1, c2) = (cov1 + &reg, cov2 + &reg);
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let cross = 0.5 * (trace_sqrt_product(&c1, &c2) + trace_sqrt_product(&c2, &c1));
    Ok((mean_term + c1.trace() + c2.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between Gaussians fitted to pooled extractor features.
pub fn desk_fid(real: &Tensor<f32>, fake: &Tensor<f32>) -> Result<FidReport> {
    if real.batch() < 2 || fake.batch() < 2 {
        return Err(domain_err!("desk_fid needs at least 2 images per side, got {} and {}", real.batch(), fake.batch()));
    }
    if real.shape()[1..] != fake.shape()[1..] {
        return Err(shape_err!("real {:?} vs fake {:?}", real.shape(), fake.shape()));
    }
    let ex = FeatureExtractor::shared();
    let (fr, ff) = (ex.pooled(real)?, ex.pooled(fake)?);
    let ((m1, c1), (m2, c2)) = (moments(&fr), moments(&ff));
    let value = frechet_distance(m1.as_slice(), &c1, m2.as_slice(), &c2, FID_EPSILON)?;
    Ok(FidReport { value, epsilon: FID_EPSILON, n_real: real.batch(), n_fake: fake.batch(), feature_dim: m1.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub diversity: DiversityReport,
    pub fid: FidReport,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_images(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * 32 * 32).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        Tensor::new(vec![n, 3, 32, 32], data).unwrap()
    }

    #[test]
    fn distance_to_self_is_zero_and_symmetric() {
        let imgs = random_images(2, 3);
        let (a, b) = (imgs.select_rows(&[0]), imgs.select_rows(&[1]));
        assert_eq!(perceptual_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(perceptual_distance(&a, &b).unwrap(), perceptual_distance(&b, &a).unwrap());
        assert!(perceptual_distance(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn resolution_mismatch_is_a_shape_error() {
        let a = random_images(1, 1);
        let b = Tensor::zeros(&[1, 3, 16, 16]);
        assert!(matches!(perceptual_distance(&a, &b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let a = random_images(12, 5);
        assert!(desk_fid(&a, &a).unwrap().value < 1e-6);
    }

    #[test]
    fn fid_needs_two_images() {
        let a = random_images(1, 5);
        assert!(desk_fid(&a, &random_images(4, 6)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn fid_is_symmetric_and_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000) {
            let (a, b) = (random_images(5, s1), random_images(7, s2 + 1000));
            let (ab, ba) = (desk_fid(&a, &b).unwrap().value, desk_fid(&b, &a).unwrap().value);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0), "{ab} vs {ba}");
        }
    }
}
