//! `fsgan` command line: pretrain, adapt, eval, ablate, grid and synth.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fsgan_core::checkpoint::{load_checkpoint, save_checkpoint, MANIFEST};
use fsgan_core::config::{read_flat, FlatConfig, ModelSpec, TrainConfig};
use fsgan_core::data::{load_image_dir, save_grid, ImageDataset};
use fsgan_core::metrics::{desk_fid, fixed_noise, intra_diversity, EvalRecord, ImageSampler, DEFAULT_N_GENERATED};
use fsgan_core::nets::{Generator, Network};
use fsgan_core::synth::{synth_domain, SynthDomainSpec};
use fsgan_core::tensor::Tensor;
use fsgan_core::trainer::{pretrain, run, start_adaptation, TrainState};

pub const DEFAULT_SOURCE_COUNT: usize = 5000;
pub const DEFAULT_SOURCE_SEED: u64 = 1;
pub const DEFAULT_TARGET_SEED: u64 = 100;
pub const EVAL_FILE: &str = "eval.json";
pub const TARGET_FILE: &str = "target.json";

#[derive(Debug, Parser)]
#[command(name = "fsgan", version, about = "Few-shot GAN adaptation with masked discrimination and cross-domain consistency")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a fresh source pair on a large dataset.
    Pretrain(PretrainArgs),
    /// Adapt a source checkpoint to a few target images.
    Adapt(AdaptArgs),
    /// Diversity and desk-FID of a checkpoint's generator.
    Eval(EvalArgs),
    /// One adaptation + evaluation per value of a config axis, collected in a table.
    Ablate(AblateArgs),
    /// Render a sample grid from a persisted noise bank.
    Grid(GridArgs),
    /// Write a synthetic domain as PNG files.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn flat(&self) -> Result<FlatConfig> {
        let mut flat = match &self.config {
            Some(p) => read_flat(p)?,
            None => FlatConfig::new(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            flat.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(flat)
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Image directory; a synthetic source domain when omitted.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Synthetic source size.
    #[arg(long, default_value_t = DEFAULT_SOURCE_COUNT)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_SOURCE_SEED)]
    data_seed: u64,
}

#[derive(Debug, Args, Clone)]
struct TargetArgs {
    /// Target image directory; a synthetic hue-shifted domain when omitted.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Synthetic target size (defaults to zsub.k).
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TARGET_SEED)]
    data_seed: u64,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Source checkpoint directory.
    #[arg(long)]
    source: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint already in `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training shots directory; the default synthetic target when omitted.
    #[arg(long)]
    shots: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_N_GENERATED)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TARGET_SEED)]
    data_seed: u64,
    /// Report path; `<checkpoint>/eval.json` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// mask_ratio, mask_layer, mask_target, lambda, lambda_g, lambda_d, or any config key.
    #[arg(long)]
    axis: String,
    /// Comma-separated values; the axis' standard sweep when omitted.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long)]
    source: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    out: PathBuf,
    /// Images generated per evaluation.
    #[arg(long, default_value_t = DEFAULT_N_GENERATED)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG path; `<checkpoint>/grid.png` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Noise bank file, created on first use.
    #[arg(long)]
    noise: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_TARGET_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Apply the target shift (hue rotation and stripes).
    #[arg(long)]
    target: bool,
}

/// Parse `argv` (including the program name) and run; returns the process exit code.
pub fn run_cli<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let flat = a.config.flat()?;
    let model = ModelSpec::from_flat(&flat)?;
    let cfg = TrainConfig::from_flat_over(TrainConfig::pretraining(), &flat)?;
    let data = match &a.source {
        Some(dir) => load_image_dir(dir, model.resolution)?,
        None => synth_domain(&SynthDomainSpec::source(a.count, a.data_seed, model.resolution))?,
    };
    log::info!("pretraining on {} images for {} iterations", data.len(), cfg.iterations);
    let state = pretrain(&data, &model, &cfg)?;
    save_checkpoint(&state, &a.out)?;
    println!("wrote {}", a.out.join(MANIFEST).display());
    Ok(())
}

fn target_dataset(t: &TargetArgs, resolution: usize, default_shots: usize) -> Result<ImageDataset> {
    Ok(match &t.target {
        Some(dir) => load_image_dir(dir, resolution)?,
        None => synth_domain(&SynthDomainSpec::target(t.shots.unwrap_or(default_shots), t.data_seed, resolution))?,
    })
}

/// Adapt the source checkpoint in `source` with `flat` layered over the default config.
fn adapt_into(source: &Path, flat: &FlatConfig, target: &TargetArgs, out: &Path, resume: bool) -> Result<TrainState<f32>> {
    let mut state = if resume && out.join(MANIFEST).exists() {
        let s = load_checkpoint(out, None)?;
        log::info!("resuming {} at iteration {}", out.display(), s.iteration);
        s
    } else {
        let src = load_checkpoint(source, None).with_context(|| format!("loading source checkpoint {}", source.display()))?;
        if flat.keys().any(|k| k.starts_with("model.")) && ModelSpec::from_flat(flat)? != src.model {
            bail!("config model section does not match the source checkpoint architecture");
        }
        let cfg = TrainConfig::from_flat(flat)?;
        let data = target_dataset(target, src.model.resolution, cfg.zsub.k)?;
        start_adaptation(
            &src.model,
            src.pair.generator_target.params().clone(),
            src.pair.discriminator_target.params().clone(),
            &cfg,
            data.len(),
        )?
    };
    let data = target_dataset(target, state.model.resolution, state.config.zsub.k)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(TARGET_FILE), serde_json::to_string_pretty(&data.source)?)?;
    let every = state.config.checkpoint_every;
    run(&mut state, &data, |s| {
        if every > 0 && s.iteration % every == 0 && s.iteration < s.config.iterations {
            save_checkpoint(s, out)?;
        }
        Ok(())
    })?;
    save_checkpoint(&state, out)?;
    Ok(state)
}

fn cmd_adapt(a: AdaptArgs) -> Result<()> {
    let flat = a.config.flat()?;
    let state = adapt_into(&a.source, &flat, &a.target, &a.out, a.resume)?;
    if let Some(r) = state.records.last() {
        println!("iteration {}: total {:.6} cdc_g {:.3e} cdc_d {:.3e}", r.iteration + 1, r.total, r.cdc_g, r.cdc_d);
    }
    println!("wrote {}", a.out.join(MANIFEST).display());
    Ok(())
}

fn evaluate(generator: &Generator<f32>, shots: &Tensor<f32>, n: usize, seed: u64) -> Result<EvalRecord> {
    let diversity = intra_diversity(generator, shots, n, seed)?;
    let fid = desk_fid(shots, &generator.sample(n, seed)?)?;
    Ok(EvalRecord { diversity, fid, seed })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint, None)?;
    let targs = TargetArgs { target: a.shots.clone(), shots: None, data_seed: a.data_seed };
    let shots = target_dataset(&targs, state.model.resolution, state.config.zsub.k)?;
    let rec = evaluate(&state.pair.generator_target, &shots.images, a.n, a.seed)?;
    let out = a.out.unwrap_or_else(|| a.checkpoint.join(EVAL_FILE));
    fs::write(&out, serde_json::to_string_pretty(&rec)?).with_context(|| format!("writing {}", out.display()))?;
    let sample = state.pair.generator_target.sample(16.min(a.n), a.seed)?;
    save_grid(&sample, 8, &out.with_extension("png"))?;
    println!(
        "intra_diversity {:.6} ± {:.6} over {} clusters ({} undersized); desk_fid {:.6}",
        rec.diversity.intra_diversity,
        rec.diversity.std,
        rec.diversity.k,
        rec.diversity.undersized.len(),
        rec.fid.value
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn axis_key(axis: &str) -> &str {
    match axis {
        "mask_ratio" => "mask.ratio",
        "mask_layer" => "mask.layer",
        "mask_target" => "mask.target",
        "lambda" => "cdc.lambda",
        "lambda_g" => "cdc.lambda_g",
        "lambda_d" => "cdc.lambda_d",
        other => other,
    }
}

fn default_values(axis: &str, model: &ModelSpec) -> Result<Vec<String>> {
    let v: Vec<String> = match axis {
        "mask_ratio" => ["0", "0.5", "0.625", "0.75", "0.875"].map(String::from).to_vec(),
        "lambda" | "lambda_g" | "lambda_d" => ["0", "1000", "2500", "5000", "7500"].map(String::from).to_vec(),
        "mask_layer" => model.discriminator().produced_resolutions().iter().map(ToString::to_string).collect(),
        "mask_target" => ["features", "pixels"].map(String::from).to_vec(),
        other => bail!("axis `{other}` has no standard sweep; pass --values"),
    };
    Ok(v)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = a.config.flat()?;
    let key = axis_key(&a.axis).to_string();
    let mut probe = base.clone();
    probe.insert(key.clone(), "0".into());
    if let Err(e) = TrainConfig::from_flat(&probe) {
        if e.to_string().contains("unknown key") {
            bail!("unknown ablation axis `{}`", a.axis);
        }
    }
    let values = if a.values.is_empty() {
        default_values(&a.axis, &load_checkpoint(&a.source, None)?.model)?
    } else {
        a.values.clone()
    };
    fs::create_dir_all(&a.out)?;
    let mut table = String::from("value\trun\tmanifest\tintra_diversity\tdiversity_std\tdesk_fid\tfinal_total\n");
    for value in &values {
        let mut flat = base.clone();
        flat.insert(key.clone(), value.clone());
        let run_dir = a.out.join(format!("{}={}", a.axis, value));
        log::info!("ablation {} = {} -> {}", a.axis, value, run_dir.display());
        let state = adapt_into(&a.source, &flat, &a.target, &run_dir, false)?;
        let shots = target_dataset(&a.target, state.model.resolution, state.config.zsub.k)?;
        let rec = evaluate(&state.pair.generator_target, &shots.images, a.n, a.eval_seed)?;
        fs::write(run_dir.join(EVAL_FILE), serde_json::to_string_pretty(&rec)?)?;
        let total = state.records.last().map_or(f64::NAN, |r| r.total);
        writeln!(
            table,
            "{value}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            run_dir.display(),
            run_dir.join(MANIFEST).display(),
            rec.diversity.intra_diversity,
            rec.diversity.std,
            rec.fid.value,
            total
        )?;
    }
    let path = a.out.join(format!("ablation_{}.tsv", a.axis));
    fs::write(&path, &table)?;
    print!("{table}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint, None)?;
    let g = &state.pair.generator_target;
    let latent = g.config().latent_dim;
    let noise_path = a.noise.unwrap_or_else(|| a.checkpoint.join("noise_bank.json"));
    let z = if noise_path.exists() {
        let data: Vec<f32> = serde_json::from_str(&fs::read_to_string(&noise_path)?)
            .with_context(|| format!("reading noise bank {}", noise_path.display()))?;
        if !data.len().is_multiple_of(latent) {
            bail!("noise bank {} has {} values, not a multiple of latent_dim {latent}", noise_path.display(), data.len());
        }
        Tensor::new(vec![data.len() / latent, latent], data)?
    } else {
        let z = fixed_noise(a.n, latent, a.seed);
        fs::write(&noise_path, serde_json::to_string(z.data())?)?;
        z
    };
    let out = a.out.unwrap_or_else(|| a.checkpoint.join("grid.png"));
    save_grid(&g.generate(&z)?, 8, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = if a.target {
        SynthDomainSpec::target(a.count, a.seed, a.resolution)
    } else {
        SynthDomainSpec::source(a.count, a.seed, a.resolution)
    };
    synth_domain(&spec)?.save_dir(&a.out)?;
    println!("wrote {} images to {}", a.count, a.out.display());
    Ok(())
}
