//! Optimization loop: Adam with a warmup/decay schedule, global-norm
//! clipping, periodic validation, checkpoints and exact resume.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, StateHeader, StoredTensor, STATE_MAGIC};
use crate::data::{synthesize_mixture, Dataset, MixOptions, MixtureExample};
use crate::dsp::{StftConfig, TRAIN_CLIP_LEN};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossConfig};
use crate::model::{QuerySource, SeparatorConfig, SeparatorModel, Variant};
use crate::nn::{Gradients, ParamStore};
use crate::querybank::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryModality {
    Image,
    Text,
    /// Image batches on even steps, text batches on odd steps.
    Hybrid,
    Label,
}

impl QueryModality {
    pub fn name(self) -> &'static str {
        match self {
            QueryModality::Image => "image",
            QueryModality::Text => "text",
            QueryModality::Hybrid => "hybrid",
            QueryModality::Label => "label",
        }
    }
}

impl std::fmt::Display for QueryModality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryModality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "image" => Ok(QueryModality::Image),
            "text" => Ok(QueryModality::Text),
            "hybrid" => Ok(QueryModality::Hybrid),
            "label" => Ok(QueryModality::Label),
            other => Err(Error::Usage(format!(
                "unknown query modality {other:?} (expected image, text, hybrid or label)"
            ))),
        }
    }
}

/// Modality of the batch at `step` under hybrid training.
pub fn hybrid_batch_modality(step: u64) -> Modality {
    if step.is_multiple_of(2) {
        Modality::Image
    } else {
        Modality::Text
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub lr_warmup_steps: u64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub lr_decay_end: u64,
    pub validate_every: u64,
    pub variant: Variant,
    pub query_modality: QueryModality,
    pub seed: u64,
    pub lambda: f64,
    pub gamma: f64,
    /// Training crop length in samples.
    pub crop_len: usize,
    pub random_gain: bool,
    /// Fixed validation mixtures drawn from the validation split.
    pub val_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200_000,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            lr_warmup_steps: 5_000,
            lr_peak: 1e-3,
            lr_floor: 1e-4,
            lr_decay_end: 100_000,
            validate_every: 10_000,
            variant: Variant::Clipsep,
            query_modality: QueryModality::Image,
            seed: 0,
            lambda: 0.1,
            gamma: 0.25,
            crop_len: TRAIN_CLIP_LEN,
            random_gain: false,
            val_examples: 64,
        }
    }
}

/// Number of STFT frames in a desk-scale training crop.
pub const DESK_FRAMES: usize = 16;

impl TrainConfig {
    /// CPU-sized run of `steps` steps: batch 8, 16-frame crops, and the
    /// schedule compressed so that warmup takes a tenth of the run and the
    /// decay ends at the last step.
    pub fn desk(variant: Variant, steps: u64) -> Self {
        let mut cfg = Self {
            steps,
            batch_size: 8,
            validate_every: 250,
            variant,
            query_modality: if variant == Variant::Labelsep {
                QueryModality::Label
            } else {
                QueryModality::Image
            },
            crop_len: StftConfig::default().len_for_frames(DESK_FRAMES),
            val_examples: 32,
            ..Self::default()
        };
        cfg.fit_schedule_to_steps();
        cfg
    }

    pub fn fit_schedule_to_steps(&mut self) {
        self.lr_decay_end = self.steps.max(2);
        self.lr_warmup_steps = (self.steps / 10).clamp(1, self.lr_decay_end - 1);
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            gamma: self.gamma,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if !(self.lr_warmup_steps < self.lr_decay_end && self.lr_decay_end <= self.steps) {
            return bad(format!(
                "schedule needs lr_warmup_steps < lr_decay_end <= steps, got {} / {} / {}",
                self.lr_warmup_steps, self.lr_decay_end, self.steps
            ));
        }
        for (name, v) in [
            ("lr_peak", self.lr_peak),
            ("lr_floor", self.lr_floor),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if self.validate_every == 0 {
            return bad("validate_every must be positive".into());
        }
        if self.crop_len < StftConfig::default().win {
            return bad(format!("crop_len {} is shorter than one STFT window", self.crop_len));
        }
        let label_variant = self.variant == Variant::Labelsep;
        let label_modality = self.query_modality == QueryModality::Label;
        if label_variant != label_modality {
            return bad("label queries go with the labelsep variant and only with it".into());
        }
        Ok(())
    }
}

/// Piecewise-linear warmup then decay, constant after `lr_decay_end`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.lr_decay_end {
        cfg.lr_floor
    } else if step <= cfg.lr_warmup_steps {
        cfg.lr_peak * step as f64 / cfg.lr_warmup_steps as f64
    } else {
        let u = (step - cfg.lr_warmup_steps) as f64 / (cfg.lr_decay_end - cfg.lr_warmup_steps) as f64;
        cfg.lr_peak + (cfg.lr_floor - cfg.lr_peak) * u
    }
}

/// Scales `grads` to norm `max_norm` when it exceeds it. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = (1.0 - self.beta1.powi(t)) as f32;
        let c2 = (1.0 - self.beta2.powi(t)) as f32;
        let (lr, eps) = (lr as f32, self.eps as f32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub nit: f64,
    pub reg: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    /// Permutation chosen per batch example (empty for variants without a search).
    pub chosen_permutation: Vec<Vec<usize>>,
}

/// A batch item: its mixture plus the conditioning used for it.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub example: MixtureExample,
    pub queries: QuerySource,
}

/// Forward, backward, clip and Adam update for one batch. The batch loss is
/// the mean over items.
pub fn train_step(
    model: &mut SeparatorModel<f32>,
    adam: &mut Adam,
    batch: &[TrainItem],
    loss_cfg: &LossConfig,
    clip_norm: f64,
    lr: f64,
    step: u64,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grads = Gradients::zeros_like(model.params());
    let scale = 1.0 / batch.len() as f32;
    let mut sums = [0.0f64; 3];
    let mut perms = Vec::with_capacity(batch.len());
    for item in batch {
        let ex = &item.example;
        let b: LossBreakdown = model.loss_and_grad(&ex.x, &ex.targets, &item.queries, loss_cfg, scale, &mut grads)?;
        sums[0] += b.total;
        sums[1] += b.nit;
        sums[2] += b.reg;
        perms.push(b.chosen_permutation);
    }
    let n = batch.len() as f64;
    let [total, nit, reg] = sums.map(|s| s / n);
    if !total.is_finite() || !grads.all_finite() {
        let ids: Vec<String> = batch.iter().map(|i| i.example.ids.join("+")).collect();
        return Err(Error::NonFinite(format!(
            "step {step}: loss {total} or its gradient is not finite; batch [{}]",
            ids.join(", ")
        )));
    }
    let grad_norm = clip_grad_norm(&mut grads, clip_norm);
    adam.update(model.params_mut(), &grads, lr);
    Ok(StepRecord {
        step,
        lr,
        total,
        nit,
        reg,
        grad_norm,
        chosen_permutation: perms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub step: u64,
    pub val_loss: f64,
    /// Σ_i mean(noise mask i), averaged over the set; only for noise-head models.
    pub total_noise_activation: Option<f64>,
}

fn modality_queries(ds: &Dataset, idx: &[usize], modality: Modality, variant: Variant) -> Result<QuerySource> {
    match (variant, modality) {
        (Variant::Pit, _) => Ok(QuerySource::Unconditioned),
        (Variant::Labelsep, _) | (_, Modality::Label) => idx
            .iter()
            .map(|&i| {
                ds.class_ids[i]
                    .ok_or_else(|| Error::invalid(format!("{} has no label", ds.entries[i].id)))
            })
            .collect::<Result<Vec<_>>>()
            .map(QuerySource::Labels),
        _ => idx
            .iter()
            .map(|&i| ds.query(i, modality))
            .collect::<Result<Vec<_>>>()
            .map(QuerySource::Embeddings),
    }
}

/// Fixed validation mixtures: `count` pairs of distinct clips with
/// image-modality queries.
pub fn build_val_items(val: &Dataset, model_cfg: &SeparatorConfig, cfg: &TrainConfig) -> Result<Vec<TrainItem>> {
    let n = model_cfg.n;
    if val.len() < n {
        return Err(Error::invalid(format!(
            "validation split has {} clips, need at least {n}",
            val.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7661_6c69_6461_7465);
    let opts = MixOptions {
        crop_len: cfg.crop_len,
        random_gain: false,
    };
    (0..cfg.val_examples)
        .map(|_| {
            let idx = index::sample(&mut rng, val.len(), n).into_vec();
            make_item(val, &idx, Modality::Image, cfg.variant, &opts, rng.next_u64())
        })
        .collect()
}

fn make_item(
    ds: &Dataset,
    idx: &[usize],
    modality: Modality,
    variant: Variant,
    opts: &MixOptions,
    seed: u64,
) -> Result<TrainItem> {
    let ids: Vec<&str> = idx.iter().map(|&i| ds.entries[i].id.as_str()).collect();
    let clips: Vec<_> = idx.iter().map(|&i| &ds.audio[i]).collect();
    let queries = modality_queries(ds, idx, modality, variant)?;
    let embeddings = match &queries {
        QuerySource::Embeddings(e) => e.clone(),
        _ => Vec::new(),
    };
    let example = synthesize_mixture(&ids, &clips, embeddings, opts, seed)?;
    Ok(TrainItem { example, queries })
}

/// Mean loss over `items` and, for noise-head models, the mean total noise
/// activation.
pub fn validate(
    model: &SeparatorModel<f32>,
    items: &[TrainItem],
    loss_cfg: &LossConfig,
    step: u64,
) -> Result<ValMetrics> {
    if items.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let mut loss = 0.0;
    let mut activation = 0.0;
    let noisy = model.variant().has_noise_heads();
    for item in items {
        let ex = &item.example;
        loss += model.loss(&ex.x, &ex.targets, &item.queries, loss_cfg)?.total;
        if noisy {
            let pred = model.predict(&ex.x, &item.queries)?;
            activation += pred.noise_masks.iter().map(|m| m.mean() as f64).sum::<f64>();
        }
    }
    let n = items.len() as f64;
    Ok(ValMetrics {
        step,
        val_loss: loss / n,
        total_noise_activation: noisy.then_some(activation / n),
    })
}

pub const TRAIN_LOG: &str = "train.jsonl";
pub const VAL_LOG: &str = "val.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const STATE_FILE: &str = "state.qsep";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub validations: Vec<ValMetrics>,
    pub best_val_loss: Option<f64>,
}

/// Owns the model, optimizer and data for a run. With an output directory it
/// writes `train.jsonl`, `val.jsonl`, `best.ckpt`, `final.ckpt` and
/// `state.qsep`.
pub struct Trainer {
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    model: SeparatorModel<f32>,
    adam: Adam,
    step: u64,
    best_val_loss: Option<f64>,
    train: Dataset,
    val: Vec<TrainItem>,
    out_dir: Option<PathBuf>,
    log: Option<BufWriter<fs::File>>,
    validations: Vec<ValMetrics>,
    last_loss: f64,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        model_cfg: SeparatorConfig,
        train: Dataset,
        val: &Dataset,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        let model = SeparatorModel::new(model_cfg, cfg.seed)?;
        Self::assemble(cfg, model, None, 0, None, train, val, out_dir, false)
    }

    /// Continues from a state file, optionally extending the step budget.
    pub fn resume(
        state_path: &Path,
        steps: Option<u64>,
        train: Dataset,
        val: &Dataset,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        let bytes = fs::read(state_path).map_err(|e| Error::io(state_path, e))?;
        let (header, tensors): (StateHeader, Vec<StoredTensor>) = checkpoint::decode(STATE_MAGIC, &bytes)?;
        let mut cfg: TrainConfig =
            serde_json::from_value(header.train).map_err(|e| Error::invalid(format!("state train config: {e}")))?;
        if let Some(s) = steps {
            cfg.steps = s;
        }
        let count = tensors.len() / 3;
        if tensors.len() != 3 * count {
            return Err(Error::invalid("state file must hold params, m and v tensors"));
        }
        let params = checkpoint::tensors_to_params(&tensors[..count])?;
        let model = SeparatorModel::from_params(header.model, params)?;
        let mut adam = Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        for (i, t) in tensors[count..].iter().enumerate() {
            let (slot, j) = if i < count { (&mut adam.m, i) } else { (&mut adam.v, i - count) };
            if t.data.len() != slot[j].len() {
                return Err(Error::invalid(format!("optimizer tensor {} has the wrong size", t.name)));
            }
            slot[j].copy_from_slice(&t.data);
        }
        adam.t = header.adam_t;
        Self::assemble(cfg, model, Some(adam), header.step, header.best_val_loss, train, val, out_dir, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: TrainConfig,
        model: SeparatorModel<f32>,
        adam: Option<Adam>,
        step: u64,
        best_val_loss: Option<f64>,
        train: Dataset,
        val: &Dataset,
        out_dir: Option<&Path>,
        resuming: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.variant != model.variant() {
            return Err(Error::Usage(format!(
                "training variant {} differs from model variant {}",
                cfg.variant,
                model.variant()
            )));
        }
        let n = model.config().n;
        if train.len() < n {
            return Err(Error::invalid(format!("training split has {} clips, need at least {n}", train.len())));
        }
        let needs_queries = model.variant() != Variant::Pit && cfg.query_modality != QueryModality::Label;
        if needs_queries && !(train.has_queries() && val.has_queries()) {
            return Err(Error::Usage("this variant needs an embedding bank".into()));
        }
        let loss_cfg = cfg.loss_config();
        loss_cfg.validate(n).map_err(|e| Error::Usage(e.to_string()))?;
        let val = build_val_items(val, model.config(), &cfg)?;
        let log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(TRAIN_LOG);
                if resuming {
                    truncate_lines(&path, step)?;
                    truncate_val_log(&dir.join(VAL_LOG), step)?;
                } else {
                    fs::write(&path, b"").map_err(|e| Error::io(&path, e))?;
                    fs::write(dir.join(VAL_LOG), b"").map_err(|e| Error::io(dir.join(VAL_LOG), e))?;
                }
                let f = fs::OpenOptions::new()
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let adam = adam.unwrap_or_else(|| Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps));
        Ok(Self {
            cfg,
            loss_cfg,
            model,
            adam,
            step,
            best_val_loss,
            train,
            val,
            out_dir: out_dir.map(Path::to_path_buf),
            log,
            validations: Vec::new(),
            last_loss: f64::NAN,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SeparatorModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> SeparatorModel<f32> {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_val_loss
    }

    pub fn modality_at(&self, step: u64) -> Modality {
        match self.cfg.query_modality {
            QueryModality::Image => Modality::Image,
            QueryModality::Text => Modality::Text,
            QueryModality::Label => Modality::Label,
            QueryModality::Hybrid => hybrid_batch_modality(step),
        }
    }

    /// Batch for `step`, a pure function of (seed, step). Clips are drawn
    /// uniformly without replacement across the whole batch when the split
    /// is large enough, otherwise within each example.
    pub fn batch_at(&self, step: u64) -> Result<Vec<TrainItem>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        let n = self.model.config().n;
        let b = self.cfg.batch_size;
        let len = self.train.len();
        let groups: Vec<Vec<usize>> = if len >= b * n {
            let all = index::sample(&mut rng, len, b * n).into_vec();
            all.chunks(n).map(<[usize]>::to_vec).collect()
        } else {
            (0..b).map(|_| index::sample(&mut rng, len, n).into_vec()).collect()
        };
        let opts = MixOptions {
            crop_len: self.cfg.crop_len,
            random_gain: self.cfg.random_gain,
        };
        let modality = self.modality_at(step);
        groups
            .iter()
            .map(|g| make_item(&self.train, g, modality, self.cfg.variant, &opts, rng.random()))
            .collect()
    }

    /// Runs one optimizer step and logs it.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let batch = self.batch_at(step)?;
        let lr = lr_at(step, &self.cfg);
        let record = match train_step(&mut self.model, &mut self.adam, &batch, &self.loss_cfg, self.cfg.clip_norm, lr, step) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                self.dump_failure(&batch, &e);
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        self.step += 1;
        self.last_loss = record.total;
        if let Some(log) = &mut self.log {
            serde_json::to_writer(&mut *log, &record)?;
            log.write_all(b"\n").map_err(|e| Error::io(self.out_dir.clone().unwrap_or_default(), e))?;
        }
        Ok(record)
    }

    fn dump_failure(&self, batch: &[TrainItem], err: &Error) {
        if let Some(dir) = &self.out_dir {
            let dump = serde_json::json!({
                "step": self.step,
                "error": err.to_string(),
                "batch_ids": batch.iter().map(|i| i.example.ids.clone()).collect::<Vec<_>>(),
            });
            if let Ok(text) = serde_json::to_string_pretty(&dump) {
                let _ = fs::write(dir.join("nonfinite_batch.json"), text);
            }
        }
    }

    /// Validates the current parameters and updates the best checkpoint.
    pub fn validate(&mut self) -> Result<ValMetrics> {
        let metrics = validate(&self.model, &self.val, &self.loss_cfg, self.step)?;
        let improved = self.best_val_loss.is_none_or(|b| metrics.val_loss < b);
        if improved {
            self.best_val_loss = Some(metrics.val_loss);
        }
        if let Some(dir) = &self.out_dir {
            if improved {
                checkpoint::save_checkpoint(&self.model, dir.join(BEST_CHECKPOINT))?;
            }
            let path = dir.join(VAL_LOG);
            let mut f = fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut line = serde_json::to_vec(&metrics)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(&path, e))?;
        }
        log::info!(
            "step {} val_loss {:.5}{}",
            metrics.step,
            metrics.val_loss,
            metrics
                .total_noise_activation
                .map(|a| format!(" noise_activation {a:.4}"))
                .unwrap_or_default()
        );
        self.validations.push(metrics.clone());
        Ok(metrics)
    }

    /// Trains up to `cfg.steps`, validating every `validate_every` steps and
    /// after the last one, then writes the final checkpoint and state.
    pub fn run(&mut self) -> Result<TrainSummary> {
        self.run_until(self.cfg.steps)?;
        if self.validations.last().is_none_or(|v| v.step != self.step) {
            self.validate()?;
        }
        self.finish()?;
        Ok(TrainSummary {
            steps: self.step,
            final_loss: self.last_loss,
            validations: self.validations.clone(),
            best_val_loss: self.best_val_loss,
        })
    }

    /// Trains until `step` completed steps without writing final artifacts.
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        let end = step.min(self.cfg.steps);
        while self.step < end {
            let rec = self.step()?;
            if rec.step % 50 == 0 {
                log::debug!("step {} lr {:.2e} loss {:.5} grad_norm {:.3}", rec.step, rec.lr, rec.total, rec.grad_norm);
            }
            if self.step.is_multiple_of(self.cfg.validate_every) {
                self.validate()?;
            }
        }
        Ok(())
    }

    /// Flushes logs and writes `final.ckpt` and `state.qsep`.
    pub fn finish(&mut self) -> Result<()> {
        if let Some(log) = &mut self.log {
            log.flush().map_err(|e| Error::io(self.out_dir.clone().unwrap_or_default(), e))?;
        }
        if let Some(dir) = self.out_dir.clone() {
            checkpoint::save_checkpoint(&self.model, dir.join(FINAL_CHECKPOINT))?;
            self.save_state(&dir.join(STATE_FILE))?;
        }
        Ok(())
    }

    pub fn state_bytes(&self) -> Result<Vec<u8>> {
        let header = StateHeader {
            step: self.step,
            adam_t: self.adam.t,
            best_val_loss: self.best_val_loss,
            best_checkpoint: self
                .best_val_loss
                .and(self.out_dir.as_ref())
                .map(|_| BEST_CHECKPOINT.to_string()),
            model: self.model.config().clone(),
            train: serde_json::to_value(&self.cfg)?,
        };
        let mut tensors = checkpoint::params_to_tensors(self.model.params());
        let names: Vec<String> = tensors.iter().map(|t| t.name.clone()).collect();
        for (prefix, slot) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for ((name, data), p) in names.iter().zip(slot).zip(self.model.params().tensors()) {
                tensors.push(StoredTensor {
                    name: format!("{prefix}.{name}"),
                    shape: p.shape.clone(),
                    data: data.clone(),
                });
            }
        }
        checkpoint::encode(STATE_MAGIC, &header, &tensors)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, &self.state_bytes()?)
    }
}

fn truncate_lines(path: &Path, keep: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let out: String = text.lines().take(keep as usize).flat_map(|l| [l, "\n"]).collect();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn truncate_val_log(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text
        .lines()
        .filter(|l| serde_json::from_str::<ValMetrics>(l).is_ok_and(|m| m.step <= step))
        .flat_map(|l| [l, "\n"])
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_corpus, CorpusSpec, Manifest, Split, BANK_FILE, MANIFEST_FILE};
    use crate::querybank::{EmbeddingBank, QueryTemplateSet};

    #[test]
    fn schedule_points() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(5_000, &c), 1e-3);
        assert!((lr_at(52_500, &c) - 0.00055).abs() < 1e-12);
        assert_eq!(lr_at(100_000, &c), 1e-4);
        assert_eq!(lr_at(200_000, &c), 1e-4);
        let peak = (0..=200_000).step_by(500).max_by(|&a, &b| lr_at(a, &c).total_cmp(&lr_at(b, &c)));
        assert_eq!(peak, Some(5_000));
        c.validate().unwrap();
        TrainConfig::desk(Variant::ClipsepNit, 2000).validate().unwrap();
        TrainConfig::desk(Variant::Clipsep, 3).validate().unwrap();
    }

    #[test]
    fn config_rules() {
        let mut c = TrainConfig::default();
        c.steps = 1000;
        assert!(matches!(c.validate(), Err(Error::Usage(_))));
        let mut c = TrainConfig::default();
        c.lr_peak = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.query_modality = QueryModality::Label;
        assert!(c.validate().is_err());
        assert_eq!("Hybrid".parse::<QueryModality>().unwrap(), QueryModality::Hybrid);
        assert!("audio".parse::<QueryModality>().is_err());
    }

    #[test]
    fn hybrid_alternates() {
        for s in 0..10u64 {
            let want = if s % 2 == 0 { Modality::Image } else { Modality::Text };
            assert_eq!(hybrid_batch_modality(s), want);
        }
    }

    #[test]
    fn clipping_oracle() {
        let model = SeparatorModel::<f32>::new(SeparatorConfig::desk(Variant::Clipsep), 1).unwrap();
        let mut g = Gradients::zeros_like(model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..g.tensors().len() {
            let id = model.params().find(&model.params().tensors()[i].name).unwrap();
            g.get_mut(id).iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
        let before = g.clone();
        let pre = clip_grad_norm(&mut g, 1.0);
        assert!(pre > 1.0);
        let post: f64 = g.tensors().iter().flatten().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((post - 1.0).abs() < 1e-6, "{post}");
        let dot: f64 = before.tensors().iter().flatten().zip(g.tensors().iter().flatten()).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!((dot / (pre * post) - 1.0).abs() < 1e-6);
        let mut small = before.clone();
        small.scale(1e-3 / pre as f32);
        let copy = small.clone();
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, copy);
    }

    #[test]
    fn adam_first_step_and_zero_lr() {
        let model = SeparatorModel::<f32>::new(SeparatorConfig::desk(Variant::Pit), 1).unwrap();
        let mut params = model.params().clone();
        let mut g = Gradients::zeros_like(&params);
        let id = params.find("pit.0.bias").unwrap();
        g.get_mut(id)[0] = 0.5;
        let mut adam = Adam::new(&params, 0.9, 0.999, 1e-8);
        let snapshot = params.clone();
        adam.update(&mut params, &g, 0.0);
        assert_eq!(params, snapshot);
        let mut adam = Adam::new(&params, 0.9, 0.999, 1e-8);
        let b0 = params.get(id)[0];
        adam.update(&mut params, &g, 1e-2);
        // first bias-corrected step moves by lr·sign(g)
        assert!((b0 - params.get(id)[0] - 1e-2).abs() < 1e-6);
    }

    fn corpus() -> (tempfile::TempDir, Dataset, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            classes: 3,
            clips_per_class: 8,
            clip_len: 8192,
            seed: 2,
            ..CorpusSpec::default()
        };
        make_synthetic_corpus(&spec, dir.path(), false).unwrap();
        let m = Manifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
        let bank = EmbeddingBank::load(dir.path().join(BANK_FILE)).unwrap();
        let t = QueryTemplateSet::default();
        let train = Dataset::load(&m, Split::Train, Some(&bank), &t).unwrap();
        let val = Dataset::load(&m, Split::Val, Some(&bank), &t).unwrap();
        (dir, train, val)
    }

    fn tiny_cfg(variant: Variant, steps: u64) -> (TrainConfig, SeparatorConfig) {
        let mut cfg = TrainConfig::desk(variant, steps);
        cfg.batch_size = 2;
        cfg.val_examples = 2;
        cfg.crop_len = StftConfig::default().len_for_frames(8);
        cfg.validate_every = 4;
        let mut m = SeparatorConfig::desk(variant);
        m.unet_depth = 2;
        m.base_channels = 2;
        m.k = 4;
        (cfg, m)
    }

    #[test]
    fn deterministic_and_resumable() {
        let (dir, train, val) = corpus();
        let (cfg, mcfg) = tiny_cfg(Variant::ClipsepNit, 8);
        let out_a = dir.path().join("a");
        let mut a = Trainer::new(cfg.clone(), mcfg.clone(), train.clone(), &val, Some(&out_a)).unwrap();
        a.run().unwrap();
        let mut b = Trainer::new(cfg.clone(), mcfg.clone(), train.clone(), &val, None).unwrap();
        b.run().unwrap();
        assert_eq!(a.model().params(), b.model().params());
        let log = fs::read_to_string(out_a.join(TRAIN_LOG)).unwrap();
        assert_eq!(log.lines().count(), 8);
        let rec: StepRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(rec.step, 0);
        assert_eq!(rec.chosen_permutation.len(), 2);

        let out_c = dir.path().join("c");
        let mut c = Trainer::new(cfg.clone(), mcfg, train.clone(), &val, Some(&out_c)).unwrap();
        c.run_until(5).unwrap();
        c.finish().unwrap();
        drop(c);
        let mut d = Trainer::resume(&out_c.join(STATE_FILE), None, train, &val, Some(&out_c)).unwrap();
        assert_eq!(d.step_count(), 5);
        d.run().unwrap();
        assert_eq!(d.model().params(), a.model().params());
        assert_eq!(fs::read(out_c.join(TRAIN_LOG)).unwrap(), fs::read(out_a.join(TRAIN_LOG)).unwrap());
        assert_eq!(
            fs::read(out_c.join(FINAL_CHECKPOINT)).unwrap(),
            fs::read(out_a.join(FINAL_CHECKPOINT)).unwrap()
        );
    }

    #[test]
    fn validation_repeatable_and_bounded() {
        let (_dir, train, val) = corpus();
        let (cfg, mcfg) = tiny_cfg(Variant::ClipsepNit, 4);
        let mut t = Trainer::new(cfg, mcfg.clone(), train, &val, None).unwrap();
        let a = t.validate().unwrap();
        let b = t.validate().unwrap();
        assert_eq!(a.val_loss, b.val_loss);
        let act = a.total_noise_activation.unwrap();
        assert!((0.0..=mcfg.n as f64).contains(&act));
    }

    #[test]
    fn batches_use_distinct_clips_and_modalities() {
        let (_dir, train, val) = corpus();
        let (mut cfg, mcfg) = tiny_cfg(Variant::Clipsep, 4);
        cfg.query_modality = QueryModality::Hybrid;
        let t = Trainer::new(cfg, mcfg, train, &val, None).unwrap();
        for step in 0..4 {
            let batch = t.batch_at(step).unwrap();
            let mut ids: Vec<&String> = batch.iter().flat_map(|i| &i.example.ids).collect();
            let total = ids.len();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), total);
            let want = hybrid_batch_modality(step);
            for item in &batch {
                assert!(item.example.embeddings.iter().all(|e| e.modality() == want));
            }
            assert_eq!(batch[0].example.mixture, t.batch_at(step).unwrap()[0].example.mixture);
        }
    }
}
