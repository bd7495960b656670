//! Command-line front end.
//!
//! Settings resolve in this order, later wins: built-in defaults, the JSON
//! file given by `--config`, `NEGATTN_SEED` (seed only, and only when neither
//! the file nor a flag sets it), explicit flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::attention::AttentionConfig;
use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};
use crate::eval::{run_ablation, run_lambda_sweep, run_ppl_comparison, ProxyScorer, SweepSpec};
use crate::mask::{write_pgm, MaskMode};
use crate::numerics::{Rng, Tensor};
use crate::toy::{
    decode, finetune_dreambooth, generate, load_checkpoint, ppm_bytes, recontext_prompts,
    save_checkpoint, subject_prompt, train_base, Checkpoint, FinetuneConfig, GenerateOptions,
    ModelConfig, ToyDataset, TrainConfig, Vocabulary, IDENTIFIER, MASK_RESOLUTIONS,
};

pub const SEED_ENV: &str = "NEGATTN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Finetune,
    Generate,
    Sweep,
    Ablate,
    PplCompare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Finetune => "finetune",
            Command::Generate => "generate",
            Command::Sweep => "sweep",
            Command::Ablate => "ablate",
            Command::PplCompare => "ppl-compare",
        }
    }
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub lambda: f64,
    pub guidance_scale: f64,
    /// DDIM steps per generation.
    pub steps: usize,
    pub mask_resolution: usize,
    pub mask_mode: MaskMode,
    pub background_masking: bool,
    pub negative_attention: bool,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub prompt: Option<String>,
    pub subject_prompt: Option<String>,
    pub dump_masks: bool,
    pub jobs: usize,
    /// Seed of the synthetic dataset, subject photos and proxy classifiers.
    pub data_seed: u64,
    pub dataset_size: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub finetune_steps: usize,
    pub finetune_learning_rate: f64,
    pub ppl_weight: f64,
    pub subject_images: usize,
    pub class_prior_images: usize,
    pub lambdas: Option<Vec<f64>>,
    pub seeds: usize,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let ft = FinetuneConfig::default();
        Self {
            command: Command::Generate,
            seed: 0,
            lambda: 0.6,
            guidance_scale: GuidanceConfig::default().guidance_scale,
            steps: 50,
            mask_resolution: 16,
            mask_mode: MaskMode::Carry,
            background_masking: true,
            negative_attention: true,
            checkpoint: None,
            out: None,
            output_dir: PathBuf::from("out"),
            prompt: None,
            subject_prompt: None,
            dump_masks: false,
            jobs: 1,
            data_seed: 0,
            dataset_size: train.dataset_size,
            train_steps: train.steps,
            batch_size: train.batch_size,
            learning_rate: train.lr,
            finetune_steps: ft.steps,
            finetune_learning_rate: ft.lr,
            ppl_weight: 0.0,
            subject_images: 4,
            class_prior_images: 64,
            lambdas: None,
            seeds: 16,
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(Error::Usage(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return usage(format!("--lambda must be a nonnegative real, got {}", self.lambda));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return usage(format!("--guidance-scale must be >= 0, got {}", self.guidance_scale));
        }
        if !MASK_RESOLUTIONS.contains(&self.mask_resolution) {
            return usage(format!(
                "--mask-resolution must be one of {MASK_RESOLUTIONS:?}, got {}",
                self.mask_resolution
            ));
        }
        if self.steps == 0 {
            return usage("--steps must be positive".into());
        }
        if self.jobs == 0 {
            return usage("--jobs must be positive".into());
        }
        if !(self.ppl_weight >= 0.0) || !self.ppl_weight.is_finite() {
            return usage(format!("--ppl-weight must be >= 0, got {}", self.ppl_weight));
        }
        if let Some(l) = self.lambdas.iter().flatten().find(|l| !(**l >= 0.0)) {
            return usage(format!("--lambdas entries must be >= 0, got {l}"));
        }
        if self.seeds == 0 {
            return usage("--seeds must be positive".into());
        }
        match self.command {
            Command::Generate if self.prompt.is_none() => usage("generate requires --prompt".into()),
            Command::Finetune | Command::Generate | Command::Sweep | Command::Ablate | Command::PplCompare
                if self.checkpoint.is_none() =>
            {
                usage(format!("{} requires --checkpoint", self.command.name()))
            }
            _ => Ok(()),
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            lambda: self.lambda,
            negative_attention_enabled: self.negative_attention,
            background_masking_enabled: self.background_masking,
            record_maps: true,
        }
    }

    fn subject_prompt_or_default(&self) -> String {
        self.subject_prompt
            .clone()
            .unwrap_or_else(|| subject_prompt(IDENTIFIER))
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        let mut spec = SweepSpec {
            seeds: (self.seed..self.seed + self.seeds as u64).collect(),
            subject_prompt: self.subject_prompt_or_default(),
            steps: self.steps,
            guidance_scale: self.guidance_scale,
            mask_mode: self.mask_mode,
            mask_resolution: self.mask_resolution,
            ..SweepSpec::default()
        };
        if let Some(l) = &self.lambdas {
            spec.lambda_values = l.clone();
        }
        if let Some(p) = &self.prompt {
            spec.prompts = vec![p.clone()];
        } else {
            spec.prompts = recontext_prompts(IDENTIFIER);
        }
        spec
    }
}

#[derive(Parser, Debug)]
#[command(name = "negattn", about = "Toy latent diffusion with masked negative attention", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Train a base model on the synthetic shapes set
    Train(Flags),
    /// Fine-tune a checkpoint on the subject photos
    Finetune(Flags),
    /// Sample one image
    Generate(Flags),
    /// Sweep lambda and write a CSV
    Sweep(Flags),
    /// Compare plain, unmasked and masked negative attention
    Ablate(Flags),
    /// Compare negative attention with prior-preservation fine-tuning
    PplCompare(Flags),
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// JSON file with any RunConfig fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    mask_resolution: Option<usize>,
    #[arg(long, value_enum)]
    mask_mode: Option<MaskModeArg>,
    #[arg(long, action = clap::ArgAction::Set)]
    background_masking: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    negative_attention: Option<bool>,
    /// Input checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output checkpoint
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    subject_prompt: Option<String>,
    /// Write background masks as PGM
    #[arg(long)]
    dump_masks: bool,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    dataset_size: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    learning_rate: Option<f64>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    finetune_learning_rate: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    ppl_weight: Option<f64>,
    /// Comma-separated lambda values
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    lambdas: Option<Vec<f64>>,
    /// Number of consecutive seeds, starting at --seed
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskModeArg {
    Carry,
    Refresh,
}

fn overlay(dst: &mut Map<String, Value>, key: &str, v: Option<impl Serialize>) -> Result<()> {
    if let Some(v) = v {
        dst.insert(key.to_string(), serde_json::to_value(v)?);
    }
    Ok(())
}

/// Parses `argv` (program name first) into a validated config, reading
/// `NEGATTN_SEED` from the environment.
pub fn parse_args<I, S>(argv: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    parse_args_with_env(argv, std::env::var(SEED_ENV).ok())
}

pub fn parse_args_with_env<I, S>(argv: I, env_seed: Option<String>) -> Result<RunConfig>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            Error::Help(e.to_string())
        }
        _ => Error::Usage(e.to_string()),
    })?;
    let (command, f) = match cli.command {
        Sub::Train(f) => (Command::Train, f),
        Sub::Finetune(f) => (Command::Finetune, f),
        Sub::Generate(f) => (Command::Generate, f),
        Sub::Sweep(f) => (Command::Sweep, f),
        Sub::Ablate(f) => (Command::Ablate, f),
        Sub::PplCompare(f) => (Command::PplCompare, f),
    };
    let Value::Object(mut m) = serde_json::to_value(RunConfig::default())? else {
        unreachable!("config serializes to an object")
    };
    let mut seed_set = false;
    if let Some(path) = &f.config {
        let text = std::fs::read_to_string(path)?;
        let Value::Object(file) = serde_json::from_str::<Value>(&text)? else {
            return Err(Error::Usage(format!("--config {}: expected a JSON object", path.display())));
        };
        seed_set = file.contains_key("seed");
        for (k, v) in file {
            m.insert(k, v);
        }
    }
    if !seed_set && f.seed.is_none() {
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            m.insert("seed".into(), seed.into());
        }
    }
    overlay(&mut m, "command", Some(command))?;
    overlay(&mut m, "seed", f.seed)?;
    overlay(&mut m, "lambda", f.lambda)?;
    overlay(&mut m, "guidance_scale", f.guidance_scale)?;
    overlay(&mut m, "steps", f.steps)?;
    overlay(&mut m, "mask_resolution", f.mask_resolution)?;
    overlay(
        &mut m,
        "mask_mode",
        f.mask_mode.map(|x| match x {
            MaskModeArg::Carry => MaskMode::Carry,
            MaskModeArg::Refresh => MaskMode::Refresh,
        }),
    )?;
    overlay(&mut m, "background_masking", f.background_masking)?;
    overlay(&mut m, "negative_attention", f.negative_attention)?;
    overlay(&mut m, "checkpoint", f.checkpoint)?;
    overlay(&mut m, "out", f.out)?;
    overlay(&mut m, "output_dir", f.output_dir)?;
    overlay(&mut m, "prompt", f.prompt)?;
    overlay(&mut m, "subject_prompt", f.subject_prompt)?;
    overlay(&mut m, "dump_masks", f.dump_masks.then_some(true))?;
    overlay(&mut m, "jobs", f.jobs)?;
    overlay(&mut m, "data_seed", f.data_seed)?;
    overlay(&mut m, "dataset_size", f.dataset_size)?;
    overlay(&mut m, "train_steps", f.train_steps)?;
    overlay(&mut m, "batch_size", f.batch_size)?;
    overlay(&mut m, "learning_rate", f.learning_rate)?;
    overlay(&mut m, "finetune_steps", f.finetune_steps)?;
    overlay(&mut m, "finetune_learning_rate", f.finetune_learning_rate)?;
    overlay(&mut m, "ppl_weight", f.ppl_weight)?;
    overlay(&mut m, "lambdas", f.lambdas)?;
    overlay(&mut m, "seeds", f.seeds)?;
    let cfg: RunConfig =
        serde_json::from_value(Value::Object(m)).map_err(|e| Error::Usage(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Decodes a latent to 32×32 and writes it as binary PPM.
pub fn emit_image(latent: &Tensor, path: &Path) -> Result<()> {
    let img = decode(latent)?;
    std::fs::write(path, ppm_bytes(&img, crate::toy::dataset::IMAGE_SIZE)?)?;
    Ok(())
}

fn dataset(cfg: &RunConfig) -> ToyDataset {
    ToyDataset::generate(
        cfg.dataset_size,
        cfg.subject_images,
        cfg.class_prior_images,
        &mut Rng::new(cfg.data_seed),
    )
}

fn scorer(ds: &ToyDataset) -> Result<ProxyScorer> {
    ProxyScorer::fit(&ds.samples, &ds.subject_images)
}

fn checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Usage("--checkpoint is required".into()))?;
    load_checkpoint(path)
}

fn out_path(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| cfg.output_dir.join(default))
}

fn finetune_config(cfg: &RunConfig, ppl_weight: f64) -> FinetuneConfig {
    FinetuneConfig {
        steps: cfg.finetune_steps,
        lr: cfg.finetune_learning_rate,
        ppl_weight,
        seed: cfg.seed,
        ..FinetuneConfig::default()
    }
}

fn write_csv(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Executes one command, printing a summary line per phase.
pub fn run(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| dispatch(cfg))
}

fn dispatch(cfg: &RunConfig) -> Result<()> {
    match cfg.command {
        Command::Train => {
            let ds = dataset(cfg);
            let tc = TrainConfig {
                steps: cfg.train_steps,
                batch_size: cfg.batch_size,
                lr: cfg.learning_rate,
                dataset_size: cfg.dataset_size,
                seed: cfg.seed,
                model: cfg.model.clone(),
                ..TrainConfig::default()
            };
            let (ck, rep) = train_base(&ds.samples, &Vocabulary::default(), &tc, &mut Rng::new(cfg.seed))?;
            let path = out_path(cfg, "base.ckpt");
            save_checkpoint(&ck, &path)?;
            println!(
                "train: {} steps, running loss {:.6} -> {:.6}, saved {}",
                cfg.train_steps,
                rep.initial_running_loss,
                rep.final_running_loss,
                path.display()
            );
        }
        Command::Finetune => {
            let base = checkpoint(cfg)?;
            let ds = dataset(cfg);
            let fc = finetune_config(cfg, cfg.ppl_weight);
            let (ck, rep) = finetune_dreambooth(
                &base,
                &ds.subject_images,
                &ds.class_prior_images,
                IDENTIFIER,
                &fc,
                &mut Rng::new(cfg.seed),
            )?;
            let path = out_path(cfg, "finetuned.ckpt");
            save_checkpoint(&ck, &path)?;
            println!(
                "finetune: {} steps, ppl weight {}, running loss {:.6} -> {:.6}, saved {}",
                cfg.finetune_steps,
                cfg.ppl_weight,
                rep.initial_running_loss,
                rep.final_running_loss,
                path.display()
            );
        }
        Command::Generate => {
            let ck = checkpoint(cfg)?;
            let opts = GenerateOptions {
                prompt: cfg.prompt.clone().unwrap_or_default(),
                subject_prompt: cfg
                    .negative_attention
                    .then(|| cfg.subject_prompt_or_default()),
                attention: cfg.attention(),
                guidance: GuidanceConfig {
                    guidance_scale: cfg.guidance_scale,
                    ..GuidanceConfig::default()
                },
                steps: cfg.steps,
                mask_mode: cfg.mask_mode,
                mask_resolution: cfg.mask_resolution,
                keep_mask_history: cfg.dump_masks,
            };
            let g = generate(&ck.model, &opts, &mut Rng::new(cfg.seed))?;
            let path = cfg
                .out
                .clone()
                .unwrap_or_else(|| cfg.output_dir.join(format!("sample_seed{}.ppm", cfg.seed)));
            emit_image(&g.latent, &path)?;
            let mut masks = 0;
            if cfg.dump_masks {
                for (t, m) in g.masks.history() {
                    write_pgm(m, &cfg.output_dir.join(format!("mask_seed{}_t{t:04}.pgm", cfg.seed)))?;
                    masks += 1;
                }
            }
            println!("generate: wrote {} ({masks} masks)", path.display());
        }
        Command::Sweep => {
            let ck = checkpoint(cfg)?;
            let ds = dataset(cfg);
            let spec = cfg.sweep_spec();
            let table = run_lambda_sweep(&ck, &scorer(&ds)?, &spec)?;
            let path = out_path(cfg, "sweep.csv");
            write_csv(&path, &table.to_csv())?;
            println!("sweep: {} rows, wrote {}", table.rows.len(), path.display());
        }
        Command::Ablate => {
            let ck = checkpoint(cfg)?;
            let ds = dataset(cfg);
            let table = run_ablation(&ck, &scorer(&ds)?, &cfg.sweep_spec(), cfg.lambda)?;
            let path = out_path(cfg, "ablation.csv");
            write_csv(&path, &table.to_csv())?;
            for a in table.aggregates() {
                println!(
                    "ablate: {} lambda {:.2}: fidelity {:.4}, alignment {:.4}",
                    a.arm, a.lambda, a.subject_fidelity, a.text_alignment
                );
            }
            println!("ablate: wrote {}", path.display());
        }
        Command::PplCompare => {
            let base = checkpoint(cfg)?;
            let ds = dataset(cfg);
            let mut spec = cfg.sweep_spec();
            if cfg.lambdas.is_none() {
                spec.lambda_values = (1..=10).map(|i| i as f64 / 10.0).collect();
            }
            let cmp = run_ppl_comparison(
                &base,
                &ds.subject_images,
                &ds.class_prior_images,
                &scorer(&ds)?,
                &spec,
                &finetune_config(cfg, 0.0),
                None,
            )?;
            let path = out_path(cfg, "ppl.csv");
            write_csv(&path, &cmp.table.to_csv())?;
            println!(
                "ppl-compare: {} rows, {} dominating (lambda, ppl weight) pairs, wrote {}",
                cmp.table.rows.len(),
                cmp.dominating.len(),
                path.display()
            );
        }
    }
    Ok(())
}

/// Process entry: returns the exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cfg = match parse_args(argv) {
        Ok(c) => c,
        Err(Error::Help(msg)) => {
            print!("{msg}");
            return 0;
        }
        Err(Error::Usage(msg)) => {
            eprintln!("{msg}");
            return 2;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run(&cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<RunConfig> {
        let mut v = vec!["negattn"];
        v.extend_from_slice(args);
        parse_args_with_env(v, None)
    }

    #[test]
    fn generate_flags() {
        let c = parse(&["generate", "--lambda", "0.6", "--seed", "7", "--checkpoint", "m.ckpt", "--prompt", "a photo of a sks circle on green background"]).unwrap();
        assert_eq!(c.lambda, 0.6);
        assert_eq!(c.seed, 7);
        assert_eq!(c.command, Command::Generate);
        assert!(c.background_masking && c.negative_attention);
    }

    #[test]
    fn usage_errors() {
        assert!(matches!(parse(&["generate", "--checkpoint", "m"]), Err(Error::Usage(_))));
        let e = parse(&["generate", "--lambda", "-1", "--checkpoint", "m", "--prompt", "a"]).unwrap_err();
        assert!(e.to_string().contains("--lambda"), "{e}");
        assert!(matches!(parse(&["generate", "--bogus", "1"]), Err(Error::Usage(_))));
        assert!(matches!(parse(&["sweep", "--checkpoint", "m", "--mask-resolution", "20"]), Err(Error::Usage(_))));
    }

    #[test]
    fn config_file_merges_under_flags_and_env_is_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"lambda": 0.3, "steps": 10, "prompt": "a photo of a circle"}"#).unwrap();
        let ps = p.to_str().unwrap();
        let c = parse_args_with_env(["negattn", "generate", "--config", ps, "--checkpoint", "m", "--lambda", "0.9"], Some("5".into())).unwrap();
        assert_eq!(c.lambda, 0.9);
        assert_eq!(c.steps, 10);
        assert_eq!(c.seed, 5);
        let c = parse_args_with_env(["negattn", "generate", "--config", ps, "--checkpoint", "m", "--seed", "2"], Some("5".into())).unwrap();
        assert_eq!(c.seed, 2);
        std::fs::write(&p, r#"{"seed": 11, "prompt": "a"}"#).unwrap();
        let c = parse_args_with_env(["negattn", "generate", "--config", ps, "--checkpoint", "m"], Some("5".into())).unwrap();
        assert_eq!(c.seed, 11);
        std::fs::write(&p, r#"{"nonsense": 1}"#).unwrap();
        assert!(parse_args_with_env(["negattn", "train", "--config", ps], None).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = parse(&["sweep", "--checkpoint", "m", "--lambdas", "0,0.5,1", "--negative-attention", "false"]).unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.lambdas, Some(vec![0.0, 0.5, 1.0]));
        assert!(!c.negative_attention);
    }

    #[test]
    fn emit_image_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        emit_image(&Tensor::full(&[256, 3], -3.0), &p).unwrap();
        let b = std::fs::read(&p).unwrap();
        assert!(b[13..].iter().all(|&v| v == 0));
        emit_image(&Tensor::full(&[256, 3], 1.0), &p).unwrap();
        let b = std::fs::read(&p).unwrap();
        assert!(b[13..].iter().all(|&v| v == 255));
        assert_eq!(b.len(), 13 + 32 * 32 * 3);
    }
}
