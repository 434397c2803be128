//! Progressive convolutional generator and discriminator with feature taps
//! keyed by spatial resolution ("block N²").

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::masking::BatchMask;
use crate::real::Real;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BASE_RESOLUTION: usize = 4;

fn leaky<T: Real>() -> T {
    T::from_f64_lossy(LEAKY_SLOPE)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub base_resolution: usize,
    pub output_resolution: usize,
    pub channels_per_block: Vec<usize>,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn new(latent_dim: usize, output_resolution: usize, channels_per_block: Vec<usize>, seed: u64) -> Self {
        Self { latent_dim, base_resolution: BASE_RESOLUTION, output_resolution, channels_per_block, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(config_err!("latent_dim must be positive"));
        }
        if self.base_resolution != BASE_RESOLUTION {
            return Err(config_err!("base_resolution must be {}, got {}", BASE_RESOLUTION, self.base_resolution));
        }
        if !matches!(self.output_resolution, 32 | 64) {
            return Err(config_err!("output_resolution must be 32 or 64, got {}", self.output_resolution));
        }
        if self.channels_per_block.contains(&0) {
            return Err(config_err!("channel counts must be >= 1: {:?}", self.channels_per_block));
        }
        let produced = self.base_resolution << self.channels_per_block.len();
        if produced != self.output_resolution {
            return Err(config_err!(
                "{} blocks from {}² reach {}², not the requested {}²",
                self.channels_per_block.len(),
                self.base_resolution,
                produced,
                self.output_resolution
            ));
        }
        Ok(())
    }

    /// Resolutions of the upsampling block outputs, shallow to deep.
    pub fn block_resolutions(&self) -> Vec<usize> {
        (1..=self.channels_per_block.len()).map(|i| self.base_resolution << i).collect()
    }

    /// Every resolution that can be tapped: the 4² stem and each block output.
    pub fn tap_resolutions(&self) -> Vec<usize> {
        std::iter::once(self.base_resolution).chain(self.block_resolutions()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_resolution: usize,
    pub channels_per_block: Vec<usize>,
    pub tap_resolutions: Vec<usize>,
    pub seed: u64,
}

impl DiscriminatorConfig {
    pub fn new(input_resolution: usize, channels_per_block: Vec<usize>, tap_resolutions: Vec<usize>, seed: u64) -> Self {
        Self { input_resolution, channels_per_block, tap_resolutions, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.input_resolution;
        if !r.is_power_of_two() || r < 8 {
            return Err(config_err!("input_resolution must be a power of two >= 8, got {}", r));
        }
        if self.channels_per_block.contains(&0) {
            return Err(config_err!("channel counts must be >= 1: {:?}", self.channels_per_block));
        }
        let last = r.checked_shr(self.channels_per_block.len() as u32).unwrap_or(0);
        if self.channels_per_block.is_empty() || last != BASE_RESOLUTION {
            return Err(config_err!(
                "{} blocks from {}² do not end at {}²",
                self.channels_per_block.len(),
                r,
                BASE_RESOLUTION
            ));
        }
        let produced = self.produced_resolutions();
        for t in &self.tap_resolutions {
            if !produced.contains(t) {
                return Err(config_err!("no discriminator layer at {}²; available: {:?}", t, produced));
            }
        }
        Ok(())
    }

    /// Input stem resolution followed by each block output, shallow to deep.
    pub fn produced_resolutions(&self) -> Vec<usize> {
        (0..=self.channels_per_block.len()).map(|i| self.input_resolution >> i).collect()
    }

    pub fn channels_at(&self, resolution: usize) -> Option<usize> {
        let idx = self.produced_resolutions().iter().position(|&r| r == resolution)?;
        Some(if idx == 0 { self.channels_per_block[0] } else { self.channels_per_block[idx - 1] })
    }

    /// Flattened size of a layer's output.
    pub fn features_at(&self, resolution: usize) -> Option<usize> {
        self.channels_at(resolution).map(|c| c * resolution * resolution)
    }

    /// Flattened size of the final 4² block, where the image-level mask sits by default.
    pub fn final_feature_count(&self) -> usize {
        self.channels_per_block.last().copied().unwrap_or(0) * BASE_RESOLUTION * BASE_RESOLUTION
    }

    /// Receptive field of a unit at `resolution`.
    pub fn receptive_field(&self, resolution: usize) -> Option<ReceptiveField> {
        let produced = self.produced_resolutions();
        let depth = produced.iter().position(|&r| r == resolution)?;
        // 1×1 stem, then (3×3 conv, 2×2 pool) per block.
        let mut rf = ReceptiveField { size: 1, jump: 1, offset: 0 };
        for _ in 0..depth {
            rf.offset -= rf.jump as isize;
            rf.size += 2 * rf.jump;
            rf.size += rf.jump;
            rf.jump *= 2;
        }
        Some(rf)
    }
}

/// Unit `(y, x)` sees input rows `offset + jump·y ..= offset + jump·y + size − 1` (same for columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub size: usize,
    pub jump: usize,
    pub offset: isize,
}

impl ReceptiveField {
    /// Inclusive pixel span along one axis for unit index `u`, clipped to the image.
    pub fn span(&self, u: usize, image_size: usize) -> (usize, usize) {
        let lo = self.offset + (self.jump * u) as isize;
        let hi = lo + self.size as isize - 1;
        (lo.max(0) as usize, hi.min(image_size as isize - 1) as usize)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace every tensor, keeping names and shapes.
    pub fn load(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(shape_err!("expected {} tensors, got {}", self.tensors.len(), tensors.len()));
        }
        for ((name, old), new) in self.names.iter().zip(&self.tensors).zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(shape_err!("{}: expected shape {:?}, got {:?}", name, old.shape(), new.shape()));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect() }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Parameters placed on a tape, in [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

fn init_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(v * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches count")
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / fan_in as f64).sqrt()
}

/// Anything that owns a parameter set.
pub trait Network<T: Real> {
    fn params(&self) -> &ParamSet<T>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    cfg: GeneratorConfig,
    params: ParamSet<T>,
}

/// Outputs of one generator pass.
#[derive(Debug, Clone)]
pub struct GenForward {
    pub images: Var,
    pub taps: BTreeMap<usize, Var>,
}

pub fn build_generator<T: Real>(cfg: &GeneratorConfig) -> Result<Generator<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let c0 = cfg.channels_per_block[0];
    let stem = c0 * BASE_RESOLUTION * BASE_RESOLUTION;
    params.push("g.fc.weight".into(), init_tensor(&mut rng, &[stem, cfg.latent_dim], he_std(cfg.latent_dim)));
    params.push("g.fc.bias".into(), Tensor::zeros(&[stem]));
    let mut prev = c0;
    for (res, &c) in cfg.block_resolutions().into_iter().zip(&cfg.channels_per_block) {
        params.push(format!("g.block{res}.weight"), init_tensor(&mut rng, &[c, prev, 3, 3], he_std(prev * 9)));
        params.push(format!("g.block{res}.bias"), Tensor::zeros(&[c]));
        prev = c;
    }
    params.push("g.to_rgb.weight".into(), init_tensor(&mut rng, &[3, prev, 1, 1], 1.0 / (prev as f64).sqrt()));
    params.push("g.to_rgb.bias".into(), Tensor::zeros(&[3]));
    Ok(Generator { cfg: cfg.clone(), params })
}

impl<T: Real> Network<T> for Generator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
}

impl<T: Real> Generator<T> {
    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator { cfg: self.cfg.clone(), params: self.params.cast() }
    }

    /// Map `z` (B, latent_dim) to images (B, 3, R, R) in [−1, 1], capturing `taps`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, z: Var, taps: &[usize]) -> Result<GenForward> {
        let zs = tape.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.cfg.latent_dim {
            return Err(shape_err!("latent batch must be (B, {}), got {:?}", self.cfg.latent_dim, zs));
        }
        let available = self.cfg.tap_resolutions();
        if let Some(t) = taps.iter().find(|t| !available.contains(t)) {
            return Err(config_err!("no generator layer at {}²; available: {:?}", t, available));
        }
        let b = zs[0];
        let v = &bound.vars;
        let slope = leaky::<T>();
        let mut captured = BTreeMap::new();
        let mut h = tape.linear(z, v[0], v[1])?;
        h = tape.reshape(h, &[b, self.cfg.channels_per_block[0], BASE_RESOLUTION, BASE_RESOLUTION])?;
        h = tape.leaky_relu(h, slope);
        if taps.contains(&BASE_RESOLUTION) {
            captured.insert(BASE_RESOLUTION, h);
        }
        for (i, res) in self.cfg.block_resolutions().into_iter().enumerate() {
            h = tape.upsample2(h)?;
            h = tape.conv2d(h, v[2 + 2 * i], v[3 + 2 * i])?;
            h = tape.leaky_relu(h, slope);
            if taps.contains(&res) {
                captured.insert(res, h);
            }
        }
        let n = v.len();
        h = tape.conv2d(h, v[n - 2], v[n - 1])?;
        let images = tape.tanh(h);
        Ok(GenForward { images, taps: captured })
    }

    /// Gradient-free generation.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &bound, zv, &[])?;
        Ok(tape.value(out.images).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    cfg: DiscriminatorConfig,
    params: ParamSet<T>,
}

/// Outputs of one discriminator pass.
#[derive(Debug, Clone)]
pub struct DiscForward {
    /// (B, 1) image-level scores.
    pub scores: Var,
    /// Activations captured before any mask is applied at their layer.
    pub taps: BTreeMap<usize, Var>,
    /// (B, F) flattened final-block output, before masking.
    pub final_features: Var,
}

pub fn build_discriminator<T: Real>(cfg: &DiscriminatorConfig) -> Result<Discriminator<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let c0 = cfg.channels_per_block[0];
    params.push("d.from_rgb.weight".into(), init_tensor(&mut rng, &[c0, 3, 1, 1], he_std(3)));
    params.push("d.from_rgb.bias".into(), Tensor::zeros(&[c0]));
    let mut prev = c0;
    let produced = cfg.produced_resolutions();
    for (&res, &c) in produced[1..].iter().zip(&cfg.channels_per_block) {
        params.push(format!("d.block{res}.weight"), init_tensor(&mut rng, &[c, prev, 3, 3], he_std(prev * 9)));
        params.push(format!("d.block{res}.bias"), Tensor::zeros(&[c]));
        prev = c;
    }
    for &res in &produced {
        let c = cfg.channels_at(res).expect("produced resolution");
        params.push(format!("d.patch{res}.weight"), init_tensor(&mut rng, &[1, c, 1, 1], 1.0 / (c as f64).sqrt()));
        params.push(format!("d.patch{res}.bias"), Tensor::zeros(&[1]));
    }
    let f = cfg.final_feature_count();
    params.push("d.score.weight".into(), init_tensor(&mut rng, &[1, f], 1.0 / (f as f64).sqrt()));
    params.push("d.score.bias".into(), Tensor::zeros(&[1]));
    Ok(Discriminator { cfg: cfg.clone(), params })
}

impl<T: Real> Network<T> for Discriminator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
}

impl<T: Real> Discriminator<T> {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator { cfg: self.cfg.clone(), params: self.params.cast() }
    }

    fn patch_index(&self, res: usize) -> usize {
        let blocks = self.cfg.channels_per_block.len();
        let pos = self.cfg.produced_resolutions().iter().position(|&r| r == res).expect("checked by caller");
        2 + 2 * blocks + 2 * pos
    }

    /// Score images (B, 3, R, R). With `mask`, features at the mask layer are
    /// zeroed at the masked positions before flowing on to the score head.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: Var,
        taps: &[usize],
        mask: Option<&BatchMask>,
    ) -> Result<DiscForward> {
        let shape = tape.value(images).shape().to_vec();
        let r = self.cfg.input_resolution;
        if shape.len() != 4 || shape[1..] != [3, r, r] {
            return Err(shape_err!("discriminator expects (B, 3, {r}, {r}), got {:?}", shape));
        }
        let produced = self.cfg.produced_resolutions();
        if let Some(t) = taps.iter().find(|t| !produced.contains(t)) {
            return Err(config_err!("no discriminator layer at {}²; available: {:?}", t, produced));
        }
        let b = shape[0];
        if let Some(m) = mask {
            let expect = self
                .cfg
                .features_at(m.layer)
                .ok_or_else(|| config_err!("mask layer {}² does not exist; available: {:?}", m.layer, produced))?;
            m.check(b, expect)?;
        }
        let v = &bound.vars;
        let slope = leaky::<T>();
        let mut captured = BTreeMap::new();
        let mut h = tape.conv2d(images, v[0], v[1])?;
        h = tape.leaky_relu(h, slope);
        for (depth, &res) in produced.iter().enumerate() {
            if depth > 0 {
                h = tape.conv2d(h, v[2 * depth], v[2 * depth + 1])?;
                h = tape.leaky_relu(h, slope);
                h = tape.avg_pool2(h)?;
            }
            if taps.contains(&res) {
                captured.insert(res, h);
            }
            if res == BASE_RESOLUTION {
                break;
            }
            if let Some(m) = mask.filter(|m| m.layer == res) {
                h = tape.mul_const(h, Arc::new(m.indicator::<T>(b)))?;
            }
        }
        let f = self.cfg.final_feature_count();
        let final_features = tape.reshape(h, &[b, f])?;
        let mut flat = final_features;
        if let Some(m) = mask.filter(|m| m.layer == BASE_RESOLUTION) {
            flat = tape.mul_const(flat, Arc::new(m.indicator::<T>(b)))?;
        }
        let n = v.len();
        let scores = tape.linear(flat, v[n - 2], v[n - 1])?;
        Ok(DiscForward { scores, taps: captured, final_features })
    }

    /// Per-location score maps (B, 1, r, r) from the 1×1 patch head at each tap.
    pub fn patch_scores(&self, tape: &mut Tape<T>, bound: &Bound, taps: &BTreeMap<usize, Var>, resolutions: &[usize]) -> Result<Vec<Var>> {
        resolutions
            .iter()
            .map(|&res| {
                let act = *taps.get(&res).ok_or_else(|| config_err!("patch head needs a tap at {}²", res))?;
                let i = self.patch_index(res);
                tape.conv2d(act, bound.vars[i], bound.vars[i + 1])
            })
            .collect()
    }

    /// Gradient-free image-level scores.
    pub fn score(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, x, &[], None)?;
        Ok(tape.value(out.scores).clone())
    }
}

/// A parameter-identical copy that exposes no mutable access and always binds
/// as non-trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen<M>(M);

impl<M> Frozen<M> {
    pub fn inner(&self) -> &M {
        &self.0
    }
}

impl<M: Clone> Frozen<M> {
    pub fn thaw(&self) -> M {
        self.0.clone()
    }
}

pub trait CloneFrozen: Clone + Sized {
    fn clone_frozen(&self) -> Frozen<Self> {
        Frozen(self.clone())
    }
}

impl<T: Real> CloneFrozen for Generator<T> {}
impl<T: Real> CloneFrozen for Discriminator<T> {}

impl<M: Clone> Frozen<M> {
    pub fn clone_frozen(&self) -> Frozen<M> {
        self.clone()
    }
}

impl<T: Real, M: Network<T>> Network<T> for Frozen<M> {
    fn params(&self) -> &ParamSet<T> {
        self.0.params()
    }
}

impl<M> std::ops::Deref for Frozen<M> {
    type Target = M;
    fn deref(&self) -> &M {
        &self.0
    }
}

impl<T: Real> Frozen<Generator<T>> {
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.0.params.bind(tape, false)
    }
}

impl<T: Real> Frozen<Discriminator<T>> {
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.0.params.bind(tape, false)
    }
}

/// Frozen source networks and the trainable targets adapted from them.
#[derive(Debug, Clone)]
pub struct ModelPair<T> {
    pub generator_source: Frozen<Generator<T>>,
    pub generator_target: Generator<T>,
    pub discriminator_source: Frozen<Discriminator<T>>,
    pub discriminator_target: Discriminator<T>,
}

impl<T: Real> ModelPair<T> {
    /// Targets start as exact copies of the sources.
    pub fn from_source(generator: Generator<T>, discriminator: Discriminator<T>) -> Self {
        Self {
            generator_source: generator.clone_frozen(),
            discriminator_source: discriminator.clone_frozen(),
            generator_target: generator,
            discriminator_target: discriminator,
        }
    }

    pub fn cast<U: Real>(&self) -> ModelPair<U> {
        ModelPair {
            generator_source: Frozen(self.generator_source.0.cast()),
            generator_target: self.generator_target.cast(),
            discriminator_source: Frozen(self.discriminator_source.0.cast()),
            discriminator_target: self.discriminator_target.cast(),
        }
    }
}

/// Layers that feed the consistency losses, by resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureTapSet {
    pub generator_taps: Vec<usize>,
    pub discriminator_taps: Vec<usize>,
}

impl FeatureTapSet {
    /// All upsampling-block outputs for G; for D, the two layers at R/8 and
    /// R/16 of the input side (16² and 8² at 32²), mirroring 32²/16² at 256².
    pub fn defaults(g: &GeneratorConfig, d: &DiscriminatorConfig) -> Self {
        let r = d.input_resolution;
        Self { generator_taps: g.block_resolutions(), discriminator_taps: vec![r / 2, r / 4] }
    }

    pub fn validate(&self, g: &GeneratorConfig, d: &DiscriminatorConfig) -> Result<()> {
        if self.generator_taps.is_empty() || self.discriminator_taps.is_empty() {
            return Err(config_err!("tap sets must be nonempty"));
        }
        let ga = g.tap_resolutions();
        if let Some(t) = self.generator_taps.iter().find(|t| !ga.contains(t)) {
            return Err(config_err!("no generator layer at {}²; available: {:?}", t, ga));
        }
        let da = d.produced_resolutions();
        if let Some(t) = self.discriminator_taps.iter().find(|t| !da.contains(t)) {
            return Err(config_err!("no discriminator layer at {}²; available: {:?}", t, da));
        }
        Ok(())
    }
}
