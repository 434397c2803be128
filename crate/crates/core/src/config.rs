//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! cdc.lambda = 1000
//! mask.ratio = 0.75
//! adv.patch.band = 2.75, 7.625
//! ```
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `model.latent_dim` | 64 | latent size |
//! | `model.resolution` | 32 | image size (32 or 64) |
//! | `model.g_channels` | 64,32,16 | generator block widths |
//! | `model.d_channels` | 16,32,64 | discriminator block widths |
//! | `model.seed` | 0 | initialization seed |
//! | `cdc.lambda` | 1000 | sets both `cdc.lambda_g` and `cdc.lambda_d` |
//! | `cdc.lambda_g`, `cdc.lambda_d` | `cdc.lambda` | per-network weights |
//! | `cdc.generator_taps` | all block outputs | resolutions |
//! | `cdc.discriminator_taps` | R/2, R/4 | resolutions |
//! | `cdc.detach_d_in_g` | false | drop the D-consistency gradient from the G step |
//! | `mask.layer` | 4 | resolution whose output is masked |
//! | `mask.ratio` | 0.75 | fraction masked |
//! | `mask.per_sample` | true | fresh mask per image |
//! | `mask.target` | features | `features` or `pixels` |
//! | `adv.form` | softplus | `score_diff` or `softplus` |
//! | `adv.patch.enabled` | true | patch-level term |
//! | `adv.patch.band` | 22·R/256, 61·R/256 | receptive-field band in pixels |
//! | `zsub.k` | 10 | anchors (= shots) |
//! | `zsub.p` | 0.25 | fraction of each batch drawn near anchors |
//! | `zsub.sigma` | 0.05 | anchor noise |
//! | `optim.lr`, `optim.beta1`, `optim.beta2` | 0.002, 0.0, 0.99 | Adam |
//! | `train.iterations` | 1500 | |
//! | `train.batch_size` | 4 | |
//! | `train.seed` | 0 | |
//! | `train.log_every` | 100 | |
//! | `train.checkpoint_every` | 0 | 0 disables intermediate checkpoints |

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::{AdvForm, MaskSettings, MaskTarget};
use crate::error::{config_err, io_err, Error, Result};
use crate::nets::{DiscriminatorConfig, GeneratorConfig};
use crate::optim::AdamConfig;

pub type FlatConfig = BTreeMap<String, String>;

pub fn parse_flat(text: &str) -> Result<FlatConfig> {
    let mut out = FlatConfig::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err!("line {}: expected `key = value`, got `{}`", n + 1, raw.trim()))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_flat(path: &Path) -> Result<FlatConfig> {
    parse_flat(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn render_flat(cfg: &FlatConfig) -> String {
    cfg.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn get<V: FromStr>(cfg: &FlatConfig, key: &str, default: V) -> Result<V> {
    match cfg.get(key) {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| config_err!("{key}: cannot parse `{s}`")),
    }
}

fn get_list<V: FromStr>(cfg: &FlatConfig, key: &str) -> Result<Option<Vec<V>>> {
    cfg.get(key)
        .map(|s| {
            s.split(',')
                .map(|p| p.trim().parse().map_err(|_| config_err!("{key}: cannot parse `{}`", p.trim())))
                .collect()
        })
        .transpose()
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Architecture of the generator/discriminator pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub latent_dim: usize,
    pub resolution: usize,
    pub g_channels: Vec<usize>,
    pub d_channels: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { latent_dim: 64, resolution: 32, g_channels: vec![64, 32, 16], d_channels: vec![16, 32, 64], seed: 0 }
    }
}

impl ModelSpec {
    pub fn from_flat(cfg: &FlatConfig) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            latent_dim: get(cfg, "model.latent_dim", d.latent_dim)?,
            resolution: get(cfg, "model.resolution", d.resolution)?,
            g_channels: get_list(cfg, "model.g_channels")?.unwrap_or(d.g_channels),
            d_channels: get_list(cfg, "model.d_channels")?.unwrap_or(d.d_channels),
            seed: get(cfg, "model.seed", d.seed)?,
        })
    }

    pub fn to_flat(&self, out: &mut FlatConfig) {
        out.insert("model.latent_dim".into(), self.latent_dim.to_string());
        out.insert("model.resolution".into(), self.resolution.to_string());
        out.insert("model.g_channels".into(), join(&self.g_channels));
        out.insert("model.d_channels".into(), join(&self.d_channels));
        out.insert("model.seed".into(), self.seed.to_string());
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig::new(self.latent_dim, self.resolution, self.g_channels.clone(), self.seed)
    }

    /// Discriminator seed is derived from the model seed so the two networks differ.
    pub fn discriminator(&self) -> DiscriminatorConfig {
        let r = self.resolution;
        DiscriminatorConfig::new(r, self.d_channels.clone(), vec![r / 2, r / 4], self.seed.wrapping_add(0x9e37_79b9))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZsubConfig {
    pub k: usize,
    pub p: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSettings {
    pub enabled: bool,
    /// `None` scales the reference band to the model resolution.
    pub band: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_g: f64,
    pub lambda_d: f64,
    pub generator_taps: Option<Vec<usize>>,
    pub discriminator_taps: Option<Vec<usize>>,
    pub detach_d_in_g: bool,
    pub mask: MaskSettings,
    pub zsub: ZsubConfig,
    pub patch: PatchSettings,
    pub optimizer: AdamConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adv_form: AdvForm,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_g: 1000.0,
            lambda_d: 1000.0,
            generator_taps: None,
            discriminator_taps: None,
            detach_d_in_g: false,
            mask: MaskSettings { layer: 4, ratio: 0.75, per_sample: true, target: MaskTarget::Features },
            zsub: ZsubConfig { k: 10, p: 0.25, sigma: 0.05 },
            patch: PatchSettings { enabled: true, band: None },
            optimizer: AdamConfig::default(),
            iterations: 1500,
            batch_size: 4,
            seed: 0,
            adv_form: AdvForm::Softplus,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "model.latent_dim",
    "model.resolution",
    "model.g_channels",
    "model.d_channels",
    "model.seed",
    "cdc.lambda",
    "cdc.lambda_g",
    "cdc.lambda_d",
    "cdc.generator_taps",
    "cdc.discriminator_taps",
    "cdc.detach_d_in_g",
    "mask.layer",
    "mask.ratio",
    "mask.per_sample",
    "mask.target",
    "adv.form",
    "adv.patch.enabled",
    "adv.patch.band",
    "zsub.k",
    "zsub.p",
    "zsub.sigma",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "train.iterations",
    "train.batch_size",
    "train.seed",
    "train.log_every",
    "train.checkpoint_every",
];

/// Reject keys outside the documented schema.
pub fn check_keys(cfg: &FlatConfig) -> Result<()> {
    match cfg.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
        Some(k) => Err(config_err!("unknown key `{k}`")),
        None => Ok(()),
    }
}

impl TrainConfig {
    /// Plain GAN training: no mask, no consistency, no patch term, and a lower
    /// learning rate (0.0005) since the networks have no equalized learning rate.
    pub fn pretraining() -> Self {
        let mut c = Self::default();
        c.lambda_g = 0.0;
        c.lambda_d = 0.0;
        c.mask.ratio = 0.0;
        c.zsub.p = 1.0;
        c.patch.enabled = false;
        c.optimizer.lr = 0.0005;
        c.iterations = 5000;
        c.batch_size = 8;
        c
    }

    /// Direct fine-tuning baseline.
    pub fn baseline() -> Self {
        let mut c = Self::default();
        c.lambda_g = 0.0;
        c.lambda_d = 0.0;
        c.mask.ratio = 0.0;
        c.zsub.p = 1.0;
        c.patch.enabled = false;
        c
    }

    pub fn from_flat_over(base: Self, cfg: &FlatConfig) -> Result<Self> {
        check_keys(cfg)?;
        let d = base;
        let lambda: Option<f64> = cfg.get("cdc.lambda").map(|_| get(cfg, "cdc.lambda", 0.0)).transpose()?;
        let band = get_list::<f64>(cfg, "adv.patch.band")?
            .map(|v| match v.as_slice() {
                [lo, hi] if lo <= hi => Ok((*lo, *hi)),
                _ => Err(config_err!("adv.patch.band needs `low, high`")),
            })
            .transpose()?;
        let target = match cfg.get("mask.target").map(String::as_str) {
            None => d.mask.target,
            Some("features") => MaskTarget::Features,
            Some("pixels") => MaskTarget::Pixels,
            Some(o) => return Err(config_err!("mask.target must be features or pixels, got {o}")),
        };
        let c = Self {
            lambda_g: get(cfg, "cdc.lambda_g", lambda.unwrap_or(d.lambda_g))?,
            lambda_d: get(cfg, "cdc.lambda_d", lambda.unwrap_or(d.lambda_d))?,
            generator_taps: get_list(cfg, "cdc.generator_taps")?.or(d.generator_taps),
            discriminator_taps: get_list(cfg, "cdc.discriminator_taps")?.or(d.discriminator_taps),
            detach_d_in_g: get(cfg, "cdc.detach_d_in_g", d.detach_d_in_g)?,
            mask: MaskSettings {
                layer: get(cfg, "mask.layer", d.mask.layer)?,
                ratio: get(cfg, "mask.ratio", d.mask.ratio)?,
                per_sample: get(cfg, "mask.per_sample", d.mask.per_sample)?,
                target,
            },
            zsub: ZsubConfig {
                k: get(cfg, "zsub.k", d.zsub.k)?,
                p: get(cfg, "zsub.p", d.zsub.p)?,
                sigma: get(cfg, "zsub.sigma", d.zsub.sigma)?,
            },
            patch: PatchSettings { enabled: get(cfg, "adv.patch.enabled", d.patch.enabled)?, band: band.or(d.patch.band) },
            optimizer: AdamConfig {
                lr: get(cfg, "optim.lr", d.optimizer.lr)?,
                beta1: get(cfg, "optim.beta1", d.optimizer.beta1)?,
                beta2: get(cfg, "optim.beta2", d.optimizer.beta2)?,
                eps: d.optimizer.eps,
            },
            iterations: get(cfg, "train.iterations", d.iterations)?,
            batch_size: get(cfg, "train.batch_size", d.batch_size)?,
            seed: get(cfg, "train.seed", d.seed)?,
            adv_form: get(cfg, "adv.form", d.adv_form)?,
            log_every: get(cfg, "train.log_every", d.log_every)?,
            checkpoint_every: get(cfg, "train.checkpoint_every", d.checkpoint_every)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn from_flat(cfg: &FlatConfig) -> Result<Self> {
        Self::from_flat_over(Self::default(), cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_g >= 0.0 && self.lambda_d >= 0.0) {
            return Err(config_err!("cdc weights must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.mask.ratio) {
            return Err(config_err!("mask.ratio must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.zsub.p) {
            return Err(config_err!("zsub.p must lie in [0, 1]"));
        }
        if self.zsub.k < 1 {
            return Err(config_err!("zsub.k must be >= 1"));
        }
        if self.iterations < 1 {
            return Err(config_err!("train.iterations must be >= 1"));
        }
        if self.batch_size < 2 && (self.lambda_g > 0.0 || self.lambda_d > 0.0) {
            return Err(config_err!("consistency losses need train.batch_size >= 2"));
        }
        if self.batch_size < 1 {
            return Err(config_err!("train.batch_size must be >= 1"));
        }
        Ok(())
    }

    pub fn to_flat(&self, out: &mut FlatConfig) {
        let mut put = |k: &str, v: String| {
            out.insert(k.to_string(), v);
        };
        put("cdc.lambda_g", self.lambda_g.to_string());
        put("cdc.lambda_d", self.lambda_d.to_string());
        if let Some(t) = &self.generator_taps {
            put("cdc.generator_taps", join(t));
        }
        if let Some(t) = &self.discriminator_taps {
            put("cdc.discriminator_taps", join(t));
        }
        put("cdc.detach_d_in_g", self.detach_d_in_g.to_string());
        put("mask.layer", self.mask.layer.to_string());
        put("mask.ratio", self.mask.ratio.to_string());
        put("mask.per_sample", self.mask.per_sample.to_string());
        put(
            "mask.target",
            match self.mask.target {
                MaskTarget::Features => "features",
                MaskTarget::Pixels => "pixels",
            }
            .into(),
        );
        put("adv.form", self.adv_form.to_string());
        put("adv.patch.enabled", self.patch.enabled.to_string());
        if let Some((lo, hi)) = self.patch.band {
            put("adv.patch.band", format!("{lo},{hi}"));
        }
        put("zsub.k", self.zsub.k.to_string());
        put("zsub.p", self.zsub.p.to_string());
        put("zsub.sigma", self.zsub.sigma.to_string());
        put("optim.lr", self.optimizer.lr.to_string());
        put("optim.beta1", self.optimizer.beta1.to_string());
        put("optim.beta2", self.optimizer.beta2.to_string());
        put("train.iterations", self.iterations.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.seed", self.seed.to_string());
        put("train.log_every", self.log_every.to_string());
        put("train.checkpoint_every", self.checkpoint_every.to_string());
    }
}

impl FromStr for TrainConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::from_flat(&parse_flat(s)?)
    }
}
