//! `clipsep`: corpus synthesis, bank conversion, training, separation,
//! evaluation and noise-regularization sweeps.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
//! 4 missing data (files, bank ids), 1 anything else.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use clipsep_core::checkpoint::load_checkpoint;
use clipsep_core::data::{self, CorpusSpec, Dataset, Manifest, PairingOptions, Split};
use clipsep_core::eval::{dump_pair_pngs, evaluate_model};
use clipsep_core::model::{MaskOverride, QuerySource, SeparatorModel, Variant};
use clipsep_core::querybank::{frame_query, text_query};
use clipsep_core::train::{QueryModality, Trainer, ValMetrics, FINAL_CHECKPOINT, STATE_FILE, VAL_LOG};
use clipsep_core::{AudioClip, EmbeddingBank, Error as CoreError, Modality, QueryTemplateSet};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use config::{overrides, Preset, RunConfig};

/// Command-line misuse detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const RESOLVED_CONFIG: &str = "run_config.json";
pub const DEFAULT_GAMMAS: [f64; 5] = [0.0, 0.1, 0.25, 0.5, 1.0];

#[derive(Parser, Debug)]
#[command(name = "clipsep", version, about = "Query-conditioned sound separation")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a labelled synthetic corpus with manifest and embedding banks.
    SynthCorpus(SynthArgs),
    /// Convert a JSON-lines file of {id, vector} records into a binary bank.
    BankConvert(BankConvertArgs),
    /// Train a separator.
    Train(TrainArgs),
    /// Separate one WAV file with a trained checkpoint.
    Separate(SeparateArgs),
    /// Evaluate a checkpoint on deterministic target/interference pairs.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the noise-invariant model over noise regularization levels.
    GammaSweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Clips per class.
    #[arg(long, default_value_t = 10)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = clipsep_core::dsp::TRAIN_CLIP_LEN)]
    clip_len: usize,
    /// Inject background noise at this RMS relative to each clip.
    #[arg(long)]
    noise_level: Option<f32>,
    #[arg(long, default_value_t = 15.0)]
    gap_degrees: f64,
    #[arg(long, default_value_t = 0.1)]
    clip_rms: f64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct BankConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

/// Data and configuration shared by training-like commands.
#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// TOML or JSON file with `preset`, `[model]`, `[train]` and `[eval]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr_peak: Option<f64>,
    #[arg(long)]
    lr_floor: Option<f64>,
    #[arg(long)]
    lr_warmup_steps: Option<u64>,
    #[arg(long)]
    lr_decay_end: Option<u64>,
    #[arg(long)]
    validate_every: Option<u64>,
    #[arg(long)]
    query_modality: Option<QueryModality>,
    #[arg(long)]
    crop_len: Option<usize>,
    #[arg(long)]
    val_examples: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    unet_depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
}

impl TrainFlags {
    fn overrides(&self) -> Value {
        let j = |v: Option<Value>| v;
        overrides(&[
            ("", "preset", self.preset.map(|p| json!(p))),
            ("train", "variant", self.variant.map(|v| json!(v))),
            ("train", "steps", j(self.steps.map(Into::into))),
            ("train", "batch_size", self.batch_size.map(Into::into)),
            ("train", "seed", self.seed.map(Into::into)),
            ("train", "gamma", self.gamma.map(Into::into)),
            ("train", "lambda", self.lambda.map(Into::into)),
            ("train", "lr_peak", self.lr_peak.map(Into::into)),
            ("train", "lr_floor", self.lr_floor.map(Into::into)),
            ("train", "lr_warmup_steps", self.lr_warmup_steps.map(Into::into)),
            ("train", "lr_decay_end", self.lr_decay_end.map(Into::into)),
            ("train", "validate_every", self.validate_every.map(Into::into)),
            ("train", "query_modality", self.query_modality.map(|m| json!(m))),
            ("train", "crop_len", self.crop_len.map(Into::into)),
            ("train", "val_examples", self.val_examples.map(Into::into)),
            ("model", "k", self.k.map(Into::into)),
            ("model", "unet_depth", self.unet_depth.map(Into::into)),
            ("model", "base_channels", self.base_channels.map(Into::into)),
        ])
    }
}

#[derive(Args, Debug, Clone)]
struct EvalFlags {
    /// Number of target/interference pairs.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long)]
    eval_crop_len: Option<usize>,
    /// Query modality used at evaluation (image, text or label).
    #[arg(long)]
    modality: Option<String>,
    #[arg(long)]
    split: Option<String>,
    /// Interference clips with this label are never used (repeatable).
    #[arg(long = "exclude-label")]
    exclude_labels: Vec<String>,
}

impl EvalFlags {
    fn overrides(&self) -> Result<Value> {
        let modality = match &self.modality {
            Some(m) => Some(json!(parse_modality(m)?)),
            None => None,
        };
        let split = match &self.split {
            Some(s) => Some(json!(parse_split(s)?)),
            None => None,
        };
        Ok(overrides(&[
            ("eval", "count", self.count.map(Into::into)),
            ("eval", "seed", self.eval_seed.map(Into::into)),
            ("eval", "crop_len", self.eval_crop_len.map(Into::into)),
            ("eval", "modality", modality),
            ("eval", "split", split),
            (
                "eval",
                "exclude_labels",
                (!self.exclude_labels.is_empty()).then(|| json!(self.exclude_labels)),
            ),
        ]))
    }
}

fn parse_modality(s: &str) -> Result<Modality> {
    match s.to_ascii_lowercase().as_str() {
        "image" => Ok(Modality::Image),
        "text" => Ok(Modality::Text),
        "label" => Ok(Modality::Label),
        _ => bail!(UsageError(format!("unknown modality {s:?} (image, text or label)"))),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => bail!(UsageError(format!("unknown split {s:?} (train, val or test)"))),
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out: PathBuf,
    /// Continue from `<out>/state.qsep`.
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed steps and save a resumable state.
    #[arg(long)]
    stop_at: Option<u64>,
}

#[derive(Args, Debug)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Bank id used directly as an image query; repeat to average frames.
    #[arg(long = "query-id")]
    query_ids: Vec<String>,
    /// Free text routed through the prompt templates.
    #[arg(long)]
    query_text: Option<String>,
    /// Class index for label-conditioned models.
    #[arg(long)]
    label: Option<usize>,
    /// Diagnostic: apply an all-ones mask instead of the model's prediction.
    #[arg(long)]
    all_ones_mask: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Interference clips come from this manifest's split (default: same manifest).
    #[arg(long)]
    interference_manifest: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    eval: EvalFlags,
    /// Write spectrogram panels for the first N pairs.
    #[arg(long, default_value_t = 0)]
    png_pairs: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    eval: EvalFlags,
    /// Bank used for the text-query column (default: the training bank).
    #[arg(long)]
    text_bank: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated noise regularization levels.
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Joins the error chain, skipping causes already spelled out by their parent.
fn render(err: &anyhow::Error) -> String {
    let mut msg = err.to_string();
    for cause in err.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Usage(_) | CoreError::InvalidInput(_) | CoreError::Json(_)) => 2,
        Some(CoreError::NonFinite(_) | CoreError::UndefinedMetric(_)) => 3,
        Some(
            CoreError::MissingIds(_)
            | CoreError::Io { .. }
            | CoreError::Wav { .. }
            | CoreError::Format { .. }
            | CoreError::ClipTooShort { .. },
        ) => 4,
        _ => 1,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthCorpus(a) => cmd_synth_corpus(a),
        Command::BankConvert(a) => cmd_bank_convert(a),
        Command::Train(a) => cmd_train(a),
        Command::Separate(a) => cmd_separate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::GammaSweep(a) => cmd_gamma_sweep(a),
    }
}

fn cmd_synth_corpus(a: SynthArgs) -> Result<()> {
    let spec = CorpusSpec {
        classes: a.classes,
        clips_per_class: a.clips,
        clip_len: a.clip_len,
        seed: a.seed,
        noise_level: a.noise_level,
        gap_degrees: a.gap_degrees,
        clip_rms: a.clip_rms,
    };
    let summary = data::make_synthetic_corpus(&spec, &a.out, a.force)?;
    log::info!(
        "wrote {} clips in {} classes and {} bank records to {}",
        summary.clips,
        summary.labels.len(),
        summary.bank_records,
        a.out.display()
    );
    Ok(())
}

fn cmd_bank_convert(a: BankConvertArgs) -> Result<()> {
    let f = fs::File::open(&a.input).map_err(|e| CoreError::Io {
        path: a.input.clone(),
        source: e,
    })?;
    let bank = EmbeddingBank::from_jsonl(BufReader::new(f))?;
    bank.write(&a.output)?;
    log::info!("wrote {} records to {}", bank.len(), a.output.display());
    Ok(())
}

fn load_bank(path: Option<&Path>) -> Result<Option<EmbeddingBank>> {
    Ok(match path {
        Some(p) => Some(EmbeddingBank::load(p)?),
        None => None,
    })
}

/// Whether `variant` trained with `modality` reads the embedding bank.
fn uses_bank(variant: Variant, modality: QueryModality) -> bool {
    variant != Variant::Pit && modality != QueryModality::Label
}

struct TrainData {
    cfg: RunConfig,
    train: Dataset,
    val: Dataset,
}

fn prepare_training(flags: &TrainFlags, extra: Value) -> Result<TrainData> {
    let mut over = flags.overrides();
    config::merge(&mut over, &extra);
    let mut cfg = RunConfig::resolve(flags.config.as_deref(), over)?;
    let manifest = Manifest::load(&flags.manifest)?;
    if cfg.model.variant == Variant::Labelsep && cfg.model.num_labels == 0 {
        cfg.model.num_labels = manifest.labels().len();
    }
    cfg.validate()?;
    let needs_bank = uses_bank(cfg.train.variant, cfg.train.query_modality);
    let bank = if needs_bank {
        let path = flags
            .bank
            .as_deref()
            .ok_or_else(|| UsageError(format!("--bank is required for {}", cfg.train.variant)))?;
        load_bank(Some(path))?
    } else {
        if flags.bank.is_some() {
            log::warn!("{} training ignores --bank", cfg.train.variant);
        }
        None
    };
    let templates = QueryTemplateSet::default();
    manifest.validate(bank.as_ref(), &templates)?;
    let train = Dataset::load(&manifest, Split::Train, bank.as_ref(), &templates)?;
    let val = Dataset::load(&manifest, Split::Val, bank.as_ref(), &templates)?;
    Ok(TrainData { cfg, train, val })
}

fn train_into(data: TrainData, out: &Path, resume: bool, stop_at: Option<u64>) -> Result<Option<ValMetrics>> {
    data.cfg.write(out, RESOLVED_CONFIG)?;
    let mut trainer = if resume {
        Trainer::resume(
            &out.join(STATE_FILE),
            Some(data.cfg.train.steps),
            data.train,
            &data.val,
            Some(out),
        )?
    } else {
        Trainer::new(data.cfg.train.clone(), data.cfg.model.clone(), data.train, &data.val, Some(out))?
    };
    if let Some(step) = stop_at.filter(|&s| s < trainer.config().steps) {
        trainer.run_until(step)?;
        trainer.finish()?;
        log::info!("stopped after {} steps; resume with --resume", trainer.step_count());
        return Ok(None);
    }
    let summary = trainer.run()?;
    log::info!(
        "trained {} steps, final batch loss {:.5}, best val loss {:?}",
        summary.steps,
        summary.final_loss,
        summary.best_val_loss
    );
    Ok(summary.validations.last().cloned())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = prepare_training(&a.flags, json!({}))?;
    train_into(data, &a.out, a.resume, a.stop_at)?;
    Ok(())
}

fn cmd_separate(a: SeparateArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let clip = AudioClip::read_wav(&a.input)?;
    if model.variant() == Variant::Pit {
        return separate_pit(&model, &clip, &a.output);
    }
    let sources = usize::from(!a.query_ids.is_empty()) + usize::from(a.query_text.is_some()) + usize::from(a.label.is_some());
    if sources != 1 && !a.all_ones_mask {
        bail!(UsageError("give exactly one of --query-id, --query-text or --label".into()));
    }
    let query = if let Some(class) = a.label {
        model.label_embedding(class)?
    } else if a.all_ones_mask && sources == 0 {
        clipsep_core::QueryEmbedding::new(vec![0.0; clipsep_core::EMBED_DIM], Modality::Image, "none")?
    } else {
        let bank = load_bank(a.bank.as_deref())?
            .ok_or_else(|| UsageError("--bank is required for --query-id and --query-text".into()))?;
        match &a.query_text {
            Some(text) => text_query(&bank, text, &QueryTemplateSet::default())?,
            None => frame_query(&bank, &a.query_ids)?,
        }
    };
    let mask = a.all_ones_mask.then_some(MaskOverride::Ones);
    let out = model.separate_with(&clip, &query, mask)?;
    out.write_wav(&a.output)?;
    log::info!("wrote {}", a.output.display());
    Ok(())
}

fn separate_pit(model: &SeparatorModel<f32>, clip: &AudioClip, output: &Path) -> Result<()> {
    let spec = clipsep_core::dsp::stft(clip)?;
    let masks = model.predict(&spec.magnitude(), &QuerySource::Unconditioned)?.query_masks;
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("source");
    for (i, m) in masks.iter().enumerate() {
        let est = clipsep_core::dsp::istft(&clipsep_core::dsp::apply_mask(&spec, m)?, clip.len())?;
        let path = output.with_file_name(format!("{stem}_{i}.wav"));
        est.write_wav(&path)?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

struct EvalContext {
    targets: Dataset,
    pairs: Vec<data::EvalPair>,
}

fn eval_context(
    manifest: &Path,
    interference: Option<&Path>,
    bank: Option<&EmbeddingBank>,
    eval_cfg: &config::EvalSettings,
) -> Result<EvalContext> {
    let templates = QueryTemplateSet::default();
    let m = Manifest::load(manifest)?;
    m.validate(bank, &templates)?;
    let targets = Dataset::load(&m, eval_cfg.split, bank, &templates)?;
    let interf = match interference {
        Some(p) => {
            let im = Manifest::load(p)?;
            im.validate(None, &templates)?;
            Dataset::load(&im, eval_cfg.split, None, &templates)?
        }
        None => targets.clone(),
    };
    let opts = PairingOptions {
        count: eval_cfg.count,
        seed: eval_cfg.seed,
        exclude_labels: eval_cfg.exclude_labels.clone(),
        distinct_labels: eval_cfg.distinct_labels,
        crop_len: eval_cfg.crop_len,
    };
    let pairs = data::eval_pairing(&targets, &interf, &opts)?;
    Ok(EvalContext { targets, pairs })
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut over = a.eval.overrides()?;
    config::merge(&mut over, &json!({"train": {"variant": model.variant()}}));
    let mut cfg = RunConfig::resolve(a.config.as_deref(), over)?;
    cfg.model = model.config().clone();
    if a.eval.modality.is_none() && model.variant() == Variant::Labelsep {
        cfg.eval.modality = Modality::Label;
    }
    let needs_bank = model.variant() != Variant::Pit && cfg.eval.modality != Modality::Label;
    let bank = if needs_bank {
        let p = a
            .bank
            .as_deref()
            .ok_or_else(|| UsageError("--bank is required for query-conditioned evaluation".into()))?;
        load_bank(Some(p))?
    } else {
        None
    };
    let ctx = eval_context(&a.manifest, a.interference_manifest.as_deref(), bank.as_ref(), &cfg.eval)?;
    let report = evaluate_model(&model, &ctx.targets, &ctx.pairs, cfg.eval.modality)?;
    cfg.write(&a.out, RESOLVED_CONFIG)?;
    report.write(&a.out.join("report.json"), Some(&a.out.join("report.txt")))?;
    for (i, pair) in ctx.pairs.iter().take(a.png_pairs).enumerate() {
        dump_pair_pngs(&a.out.join(format!("pair_{i:03}")), &model, &ctx.targets, pair, cfg.eval.modality)?;
    }
    print!("{}", report.table());
    Ok(())
}

/// One row of the sweep summary: the three panels are image-query SDR,
/// text-query SDR and total noise activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub image_mean_sdr: f64,
    pub image_se: f64,
    pub text_mean_sdr: f64,
    pub text_se: f64,
    pub mean_sdr_improvement: f64,
    pub noise_activation: f64,
}

fn last_validation(dir: &Path) -> Result<ValMetrics> {
    let path = dir.join(VAL_LOG);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::Io { path: path.clone(), source: e })?;
    let line = text
        .lines()
        .last()
        .ok_or_else(|| CoreError::InvalidInput(format!("{} is empty", path.display())))?;
    Ok(serde_json::from_str(line)?)
}

fn cmd_gamma_sweep(a: SweepArgs) -> Result<()> {
    if a.flags.variant.is_some_and(|v| v != Variant::ClipsepNit) {
        bail!(UsageError("gamma-sweep trains the clipsep-nit variant".into()));
    }
    let gammas = a.gammas.clone().unwrap_or_else(|| DEFAULT_GAMMAS.to_vec());
    if gammas.is_empty() {
        bail!(UsageError("--gammas is empty".into()));
    }
    let bank = load_bank(a.flags.bank.as_deref())?
        .ok_or_else(|| UsageError("--bank is required for gamma-sweep".into()))?;
    let text_bank = match &a.text_bank {
        Some(p) => EmbeddingBank::load(p)?,
        None => bank.clone(),
    };
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in &gammas {
        let dir = a.out.join(format!("gamma_{gamma}"));
        let extra = {
            let mut v = a.eval.overrides()?;
            config::merge(&mut v, &json!({"train": {"variant": Variant::ClipsepNit, "gamma": gamma}}));
            v
        };
        let data = prepare_training(&a.flags, extra)?;
        let cfg = data.cfg.clone();
        if dir.join(FINAL_CHECKPOINT).is_file() && dir.join(VAL_LOG).is_file() {
            log::info!("gamma {gamma}: reusing {}", dir.display());
        } else {
            log::info!("gamma {gamma}: training into {}", dir.display());
            train_into(data, &dir, false, None)?;
        }
        let activation = last_validation(&dir)?
            .total_noise_activation
            .ok_or_else(|| CoreError::InvalidInput("validation log has no noise activation".into()))?;
        let model = load_checkpoint(dir.join(FINAL_CHECKPOINT))?;
        let image_ctx = eval_context(&a.flags.manifest, None, Some(&bank), &cfg.eval)?;
        let image = evaluate_model(&model, &image_ctx.targets, &image_ctx.pairs, Modality::Image)?;
        let text_ctx = eval_context(&a.flags.manifest, None, Some(&text_bank), &cfg.eval)?;
        let text = evaluate_model(&model, &text_ctx.targets, &text_ctx.pairs, Modality::Text)?;
        image.write(&dir.join("report_image.json"), None)?;
        text.write(&dir.join("report_text.json"), None)?;
        rows.push(SweepRow {
            gamma,
            image_mean_sdr: image.sdr.mean,
            image_se: image.sdr.standard_error,
            text_mean_sdr: text.sdr.mean,
            text_se: text.sdr.standard_error,
            mean_sdr_improvement: image.improvement.mean,
            noise_activation: activation,
        });
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let json_path = a.out.join("sweep.json");
    fs::write(&json_path, serde_json::to_string_pretty(&rows)? + "\n")
        .map_err(|e| CoreError::Io { path: json_path, source: e })?;
    let table = sweep_table(&rows);
    let table_path = a.out.join("sweep.txt");
    fs::write(&table_path, &table).map_err(|e| CoreError::Io { path: table_path, source: e })?;
    print!("{table}");
    Ok(())
}

fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6}  {:>16}  {:>16}  {:>10}  {:>16}",
        "gamma", "image SDR (dB)", "text SDR (dB)", "SDRi (dB)", "noise activation"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>6}  {:>16}  {:>16}  {:>10.2}  {:>16.4}",
            r.gamma,
            format!("{:.2} ± {:.2}", r.image_mean_sdr, r.image_se),
            format!("{:.2} ± {:.2}", r.text_mean_sdr, r.text_se),
            r.mean_sdr_improvement,
            r.noise_activation
        );
    }
    out
}
