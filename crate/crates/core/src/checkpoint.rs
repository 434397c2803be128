//! Checkpoint directories: `manifest.json`, `losses.jsonl`, and one
//! little-endian float32 file per named tensor under `params/<group>/`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adversarial::AnchorSet;
use crate::config::{FlatConfig, ModelSpec, TrainConfig};
use crate::error::{io_err, Error, Result};
use crate::nets::{build_discriminator, build_generator, CloneFrozen, ModelPair, Network, ParamSet};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::trainer::{LossRecord, RunKind, TrainState};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const LOSS_LOG: &str = "losses.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub group: String,
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngRecord {
    fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |detail: String| Error::Checkpoint { field: "rng".into(), detail };
        if self.seed.len() != 64 {
            return Err(bad(format!("seed must be 64 hex digits, got {}", self.seed.len())));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|e| bad(e.to_string()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub code_version: String,
    pub kind: RunKind,
    pub model: ModelSpec,
    pub generator_config: crate::nets::GeneratorConfig,
    pub discriminator_config: crate::nets::DiscriminatorConfig,
    pub config: FlatConfig,
    pub iteration: usize,
    pub anchors: AnchorSet,
    pub rng: RngRecord,
    pub adam_g_step: u64,
    pub adam_d_step: u64,
    pub parameters: Vec<ParamEntry>,
}

fn write_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_f32(path: &Path, shape: &[usize]) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Checkpoint {
            field: path.display().to_string(),
            detail: format!("expected {} bytes for shape {:?}, found {}", 4 * n, shape, bytes.len()),
        });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape.to_vec(), data)
}

fn groups(state: &TrainState<f32>) -> Vec<(&'static str, &ParamSet<f32>, Option<&[Tensor<f32>]>)> {
    let p = &state.pair;
    vec![
        ("generator", p.generator_target.params(), None),
        ("discriminator", p.discriminator_target.params(), None),
        ("generator_source", p.generator_source.params(), None),
        ("discriminator_source", p.discriminator_source.params(), None),
        ("adam_g_m", p.generator_target.params(), Some(&state.opt_g.m[..])),
        ("adam_g_v", p.generator_target.params(), Some(&state.opt_g.v[..])),
        ("adam_d_m", p.discriminator_target.params(), Some(&state.opt_d.m[..])),
        ("adam_d_v", p.discriminator_target.params(), Some(&state.opt_d.v[..])),
    ]
}

pub fn save_checkpoint(state: &TrainState<f32>, dir: &Path) -> Result<()> {
    let mut parameters = Vec::new();
    for (group, names, tensors) in groups(state) {
        let gdir = dir.join("params").join(group);
        fs::create_dir_all(&gdir).map_err(io_err(&gdir))?;
        let tensors = tensors.unwrap_or(names.tensors());
        for (name, t) in names.names().iter().zip(tensors) {
            let file = format!("params/{group}/{name}.f32");
            write_f32(&dir.join(&file), t)?;
            parameters.push(ParamEntry { group: group.into(), name: name.clone(), file, shape: t.shape().to_vec() });
        }
    }
    let mut config = FlatConfig::new();
    state.model.to_flat(&mut config);
    state.config.to_flat(&mut config);
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        code_version: env!("CARGO_PKG_VERSION").into(),
        kind: state.kind,
        model: state.model.clone(),
        generator_config: state.pair.generator_target.config().clone(),
        discriminator_config: state.pair.discriminator_target.config().clone(),
        config,
        iteration: state.iteration,
        anchors: state.anchors.clone(),
        rng: RngRecord::capture(&state.rng),
        adam_g_step: state.opt_g.step,
        adam_d_step: state.opt_d.step,
        parameters,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    write_loss_log(&dir.join(LOSS_LOG), &state.records)
}

pub fn write_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str(&line).map_err(|e| Error::Checkpoint { field: format!("{LOSS_LOG} line {}", i + 1), detail: e.to_string() })
        })
        .collect()
}

fn field<V: DeserializeOwned>(v: &Value, name: &str) -> Result<V> {
    let raw = v.get(name).ok_or_else(|| Error::Checkpoint { field: name.into(), detail: "missing".into() })?;
    serde_json::from_value(raw.clone()).map_err(|e| Error::Checkpoint { field: name.into(), detail: e.to_string() })
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Checkpoint { field: MANIFEST.into(), detail: e.to_string() })?;
    let m = CheckpointManifest {
        format_version: field(&v, "format_version")?,
        code_version: field(&v, "code_version")?,
        kind: field(&v, "kind")?,
        model: field(&v, "model")?,
        generator_config: field(&v, "generator_config")?,
        discriminator_config: field(&v, "discriminator_config")?,
        config: field(&v, "config")?,
        iteration: field(&v, "iteration")?,
        anchors: field(&v, "anchors")?,
        rng: field(&v, "rng")?,
        adam_g_step: field(&v, "adam_g_step")?,
        adam_d_step: field(&v, "adam_d_step")?,
        parameters: field(&v, "parameters")?,
    };
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint { field: "format_version".into(), detail: format!("unsupported version {}", m.format_version) });
    }
    if m.generator_config != m.model.generator() || m.discriminator_config != m.model.discriminator() {
        return Err(Error::Checkpoint {
            field: "model".into(),
            detail: "network configs disagree with the model section".into(),
        });
    }
    Ok(m)
}

/// Tensors of one group, in the order of `template`.
pub fn load_group(dir: &Path, manifest: &CheckpointManifest, group: &str, template: &ParamSet<f32>) -> Result<Vec<Tensor<f32>>> {
    template
        .iter()
        .map(|(name, t)| {
            let entry = manifest
                .parameters
                .iter()
                .find(|e| e.group == group && e.name == name)
                .ok_or_else(|| Error::Checkpoint { field: format!("parameters/{group}/{name}"), detail: "missing".into() })?;
            if entry.shape != t.shape() {
                return Err(Error::Checkpoint {
                    field: format!("parameters/{group}/{name}"),
                    detail: format!("architecture mismatch: stored shape {:?}, model expects {:?}", entry.shape, t.shape()),
                });
            }
            read_f32(&dir.join(&entry.file), &entry.shape)
        })
        .collect()
}

/// Restore a full training state; `expect_model` guards against loading into a different architecture.
pub fn load_checkpoint(dir: &Path, expect_model: Option<&ModelSpec>) -> Result<TrainState<f32>> {
    let m = read_manifest(dir)?;
    if let Some(expect) = expect_model {
        if expect != &m.model {
            return Err(Error::Checkpoint {
                field: "model".into(),
                detail: format!("architecture mismatch: checkpoint has {:?}, caller expects {:?}", m.model, expect),
            });
        }
    }
    let config = TrainConfig::from_flat(
        &m.config.iter().filter(|(k, _)| !k.starts_with("model.")).map(|(k, v)| (k.clone(), v.clone())).collect(),
    )
    .map_err(|e| Error::Checkpoint { field: "config".into(), detail: e.to_string() })?;
    let mut g = build_generator::<f32>(&m.generator_config)?;
    let mut d = build_discriminator::<f32>(&m.discriminator_config)?;
    let t = load_group(dir, &m, "generator_source", g.params())?;
    g.params_mut().load(t)?;
    let t = load_group(dir, &m, "discriminator_source", d.params())?;
    d.params_mut().load(t)?;
    let (gs, ds) = (g.clone_frozen(), d.clone_frozen());
    let t = load_group(dir, &m, "generator", g.params())?;
    g.params_mut().load(t)?;
    let t = load_group(dir, &m, "discriminator", d.params())?;
    d.params_mut().load(t)?;
    let mut opt_g = Adam::new(config.optimizer, g.params());
    opt_g.step = m.adam_g_step;
    opt_g.m = load_group(dir, &m, "adam_g_m", g.params())?;
    opt_g.v = load_group(dir, &m, "adam_g_v", g.params())?;
    let mut opt_d = Adam::new(config.optimizer, d.params());
    opt_d.step = m.adam_d_step;
    opt_d.m = load_group(dir, &m, "adam_d_m", d.params())?;
    opt_d.v = load_group(dir, &m, "adam_d_v", d.params())?;
    let pair = ModelPair { generator_source: gs, generator_target: g, discriminator_source: ds, discriminator_target: d };
    let mut state = TrainState::new(m.kind, m.model.clone(), config, pair)?;
    state.opt_g = opt_g;
    state.opt_d = opt_d;
    state.anchors = m.anchors.clone();
    state.rng = m.rng.restore()?;
    state.iteration = m.iteration;
    let log = dir.join(LOSS_LOG);
    state.records = if log.exists() { read_loss_log(&log)? } else { Vec::new() };
    if state.records.len() != state.iteration {
        return Err(Error::Checkpoint {
            field: LOSS_LOG.into(),
            detail: format!("{} records for iteration {}", state.records.len(), state.iteration),
        });
    }
    Ok(state)
}
