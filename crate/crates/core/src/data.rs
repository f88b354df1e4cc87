//! Manifests, datasets, mix-and-separate example synthesis, the synthetic
//! desk-scale corpus and evaluation pairing.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{ground_truth_masks, stft, AudioClip, MagnitudeGrid, Mask, MaskKind, Spectrogram, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::querybank::{
    frame_query, orthonormal_embeddings, rotate_toward, text_query, EmbeddingBank, Modality, QueryEmbedding,
    QueryTemplateSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One clip in a manifest. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Audio used for training and as the evaluation input.
    pub clip_path: PathBuf,
    /// Clean stem when `clip_path` carries injected background noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_path: Option<PathBuf>,
    /// Bank ids of the frames averaged into the image query.
    pub frame_ids: Vec<String>,
    /// User text for the text query; instantiated through the templates.
    pub text: String,
    /// Class label, used only by evaluation and LabelSep.
    #[serde(default)]
    pub label: Option<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(dir: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            dir: dir.into(),
            entries,
        }
    }

    /// Reads JSON lines; blank lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(&e.id) {
                return Err(Error::invalid(format!("duplicate manifest id {:?}", e.id)));
            }
        }
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { dir, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Sorted distinct labels; a label's class id is its position here.
    pub fn labels(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter_map(|e| e.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Checks that every referenced file exists and, when a bank is given,
    /// that every frame id and instantiated text id is present.
    pub fn validate(&self, bank: Option<&EmbeddingBank>, templates: &QueryTemplateSet) -> Result<()> {
        for e in &self.entries {
            for p in std::iter::once(&e.clip_path).chain(e.clean_path.as_ref()) {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "clip not found"),
                    ));
                }
            }
        }
        if let Some(bank) = bank {
            let mut missing = Vec::new();
            for e in &self.entries {
                for id in e.frame_ids.iter().cloned().chain(templates.instantiate(&e.text)) {
                    if !bank.contains(&id) && !missing.contains(&id) {
                        missing.push(id);
                    }
                }
            }
            if !missing.is_empty() {
                return Err(Error::MissingIds(missing));
            }
        }
        Ok(())
    }
}

/// A split of a manifest with its audio loaded and queries resolved.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    /// `clip_path` audio.
    pub audio: Vec<AudioClip>,
    /// Clean stems (`clean_path`, or `clip_path` when absent).
    pub clean: Vec<AudioClip>,
    /// Empty when loaded without a bank.
    pub image_queries: Vec<QueryEmbedding>,
    pub text_queries: Vec<QueryEmbedding>,
    /// Class id per entry, indexing [`Manifest::labels`].
    pub class_ids: Vec<Option<usize>>,
}

impl Dataset {
    pub fn load(
        manifest: &Manifest,
        split: Split,
        bank: Option<&EmbeddingBank>,
        templates: &QueryTemplateSet,
    ) -> Result<Self> {
        let labels = manifest.labels();
        let entries: Vec<ManifestEntry> = manifest.split(split).into_iter().cloned().collect();
        let mut audio = Vec::with_capacity(entries.len());
        let mut clean = Vec::with_capacity(entries.len());
        let mut image_queries = Vec::new();
        let mut text_queries = Vec::new();
        let mut class_ids = Vec::with_capacity(entries.len());
        for e in &entries {
            let clip = read_clip(&manifest.resolve(&e.clip_path))?;
            let stem = match &e.clean_path {
                Some(p) => read_clip(&manifest.resolve(p))?,
                None => clip.clone(),
            };
            if stem.len() != clip.len() {
                return Err(Error::invalid(format!("{}: clean stem length differs from clip", e.id)));
            }
            audio.push(clip);
            clean.push(stem);
            if let Some(bank) = bank {
                image_queries.push(frame_query(bank, &e.frame_ids)?);
                text_queries.push(text_query(bank, &e.text, templates)?);
            }
            class_ids.push(e.label.as_ref().and_then(|l| labels.iter().position(|x| x == l)));
        }
        Ok(Self {
            entries,
            audio,
            clean,
            image_queries,
            text_queries,
            class_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_queries(&self) -> bool {
        !self.image_queries.is_empty()
    }

    pub fn query(&self, index: usize, modality: Modality) -> Result<QueryEmbedding> {
        let list = match modality {
            Modality::Image => &self.image_queries,
            Modality::Text => &self.text_queries,
            Modality::Label => return Err(Error::Usage("label queries come from the model's table".into())),
        };
        list.get(index)
            .cloned()
            .ok_or_else(|| Error::Usage("dataset was loaded without an embedding bank".into()))
    }
}

fn read_clip(path: &Path) -> Result<AudioClip> {
    let clip = AudioClip::read_wav(path)?;
    if clip.sample_rate() != SAMPLE_RATE {
        return Err(Error::invalid(format!("{}: expected {SAMPLE_RATE} Hz", path.display())));
    }
    Ok(clip)
}

/// Mixture plus everything needed to train on it or score it.
#[derive(Clone, Debug)]
pub struct MixtureExample {
    pub ids: Vec<String>,
    pub x: MagnitudeGrid,
    pub mixture_spec: Spectrogram,
    pub mixture: AudioClip,
    /// Binary ideal masks of the cropped sources.
    pub targets: Vec<Mask>,
    /// Query per source; empty when the sources carry no embeddings.
    pub embeddings: Vec<QueryEmbedding>,
    pub source_clips: Vec<AudioClip>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixOptions {
    pub crop_len: usize,
    /// Scale each cropped source by a uniform gain in [0.5, 1.5].
    pub random_gain: bool,
}

impl Default for MixOptions {
    fn default() -> Self {
        Self {
            crop_len: crate::dsp::TRAIN_CLIP_LEN,
            random_gain: false,
        }
    }
}

/// Random crop of each clip, plain sample-wise sum, binary targets from the
/// cropped sources' magnitudes. Deterministic in `seed`.
pub fn synthesize_mixture(
    ids: &[&str],
    clips: &[&AudioClip],
    embeddings: Vec<QueryEmbedding>,
    opts: &MixOptions,
    seed: u64,
) -> Result<MixtureExample> {
    if clips.is_empty() || clips.len() != ids.len() {
        return Err(Error::invalid("need one id per clip and at least one clip"));
    }
    if !embeddings.is_empty() && embeddings.len() != clips.len() {
        return Err(Error::invalid("need one embedding per clip"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let win = crate::dsp::StftConfig::default().win;
    let mut sources = Vec::with_capacity(clips.len());
    for clip in clips {
        if clip.len() < win {
            return Err(Error::ClipTooShort { len: clip.len(), min: win });
        }
        let start = if clip.len() > opts.crop_len {
            rng.random_range(0..=clip.len() - opts.crop_len)
        } else {
            0
        };
        let mut c = clip.crop(start, opts.crop_len);
        if opts.random_gain {
            let g: f32 = rng.random_range(0.5..1.5);
            c = AudioClip::new(c.samples().iter().map(|s| s * g).collect(), c.sample_rate())?;
        }
        sources.push(c);
    }
    assemble(ids.iter().map(|s| s.to_string()).collect(), sources, embeddings)
}

fn assemble(ids: Vec<String>, sources: Vec<AudioClip>, embeddings: Vec<QueryEmbedding>) -> Result<MixtureExample> {
    let refs: Vec<&AudioClip> = sources.iter().collect();
    let mixture = AudioClip::mix(&refs)?;
    let mixture_spec = stft(&mixture)?;
    let mags = sources
        .iter()
        .map(|s| Ok(stft(s)?.magnitude()))
        .collect::<Result<Vec<_>>>()?;
    let targets = ground_truth_masks(&mags, MaskKind::Binary)?;
    Ok(MixtureExample {
        ids,
        x: mixture_spec.magnitude(),
        mixture_spec,
        mixture,
        targets,
        embeddings,
        source_clips: sources,
    })
}

/// Synthetic corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub classes: usize,
    pub clips_per_class: usize,
    pub clip_len: usize,
    pub seed: u64,
    /// Background noise RMS relative to the clean clip; `None` for a clean corpus.
    pub noise_level: Option<f32>,
    /// Angle between image and text vectors in the gap bank.
    pub gap_degrees: f64,
    /// RMS level of every clean clip.
    pub clip_rms: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            clips_per_class: 10,
            clip_len: crate::dsp::TRAIN_CLIP_LEN,
            seed: 0,
            noise_level: None,
            gap_degrees: 15.0,
            clip_rms: 0.1,
        }
    }
}

/// Written alongside the corpus as `corpus.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub spec: CorpusSpec,
    pub labels: Vec<String>,
    /// `[low, high]` Hz per class.
    pub bands: Vec<[f64; 2]>,
    pub clips: usize,
    pub bank_records: usize,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BANK_FILE: &str = "bank.qbank";
pub const GAP_BANK_FILE: &str = "bank_text_gap.qbank";
pub const SUMMARY_FILE: &str = "corpus.json";

const FAMILIES: [&str; 4] = ["steady tone", "sweeping chirp", "filtered hiss", "pulsing beeps"];

pub fn class_label(c: usize) -> String {
    let base = FAMILIES[c % FAMILIES.len()];
    if c < FAMILIES.len() {
        base.to_string()
    } else {
        format!("{base} {}", c / FAMILIES.len() + 1)
    }
}

/// Passband of class `c` out of `classes`: log-spaced centers between
/// 250 Hz and 6 kHz, two-thirds of an octave wide.
pub fn class_band(c: usize, classes: usize) -> [f64; 2] {
    let center = 250.0 * (6000.0f64 / 250.0).powf((c as f64 + 0.5) / classes as f64);
    [center * 2f64.powf(-1.0 / 3.0), center * 2f64.powf(1.0 / 3.0)]
}

fn generate_clip(family: usize, band: [f64; 2], len: usize, rms: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let tau = std::f64::consts::TAU;
    let [lo, hi] = band;
    let mut out = vec![0.0; len];
    match family {
        0 => {
            // one or two steady partials inside the band
            let partials = rng.random_range(1..=2);
            for _ in 0..partials {
                let f = rng.random_range(lo..hi);
                let ph = rng.random_range(0.0..tau);
                let a = rng.random_range(0.5..1.0);
                for (i, o) in out.iter_mut().enumerate() {
                    *o += a * (tau * f * i as f64 / sr + ph).sin();
                }
            }
        }
        1 => {
            // repeated upward sweeps across the band
            let period = rng.random_range(0.2..0.5) * sr;
            let mut phase = rng.random_range(0.0..tau);
            for (i, o) in out.iter_mut().enumerate() {
                let u = (i as f64 % period) / period;
                let f = lo * (hi / lo).powf(u);
                phase += tau * f / sr;
                *o = phase.sin();
            }
        }
        2 => {
            // dense random partials approximate band-limited noise
            for _ in 0..48 {
                let f = rng.random_range(lo..hi);
                let ph = rng.random_range(0.0..tau);
                for (i, o) in out.iter_mut().enumerate() {
                    *o += (tau * f * i as f64 / sr + ph).sin();
                }
            }
        }
        _ => {
            // tone bursts gated fast enough that short crops still hold several
            let f = rng.random_range(lo..hi);
            let rate = rng.random_range(8.0..14.0);
            let duty = rng.random_range(0.3..0.6);
            let offset = rng.random_range(0.0..1.0);
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let on = ((t * rate + offset) % 1.0) < duty;
                if on {
                    *o = (tau * f * t).sin();
                }
            }
        }
    }
    scale_to_rms(&mut out, rms);
    out
}

/// Background types: each noisy clip carries stationary noise confined to
/// one of these bands (Hz), picked independently of its class.
pub const BACKGROUND_BANDS: [[f64; 2]; 2] = [[50.0, 4000.0], [4000.0, 7900.0]];

/// Stationary Gaussian noise band-limited to `band` by zeroing FFT bins.
fn band_noise(band: [f64; 2], len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..len).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let sr = SAMPLE_RATE as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(len - k) as f64 * sr / len as f64;
        if f < band[0] || f >= band[1] {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

fn scale_to_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

fn to_clip(x: &[f64]) -> Result<AudioClip> {
    AudioClip::new(x.iter().map(|&v| v as f32).collect(), SAMPLE_RATE)
}

/// Writes a labelled synthetic corpus to `out`:
///
/// * `audio/*.wav` clips (plus `*_clean.wav` stems when noise is injected),
/// * `manifest.jsonl` with a per-class train/val/test split,
/// * `bank.qbank`, where image frames and text prompts of a class share one
///   orthonormal vector, and `bank_text_gap.qbank`, where the text vectors are
///   rotated away from the image vectors by `gap_degrees`,
/// * `corpus.json` describing the result.
///
/// Refuses a non-empty `out` unless `force` is set. Output is a pure
/// function of `spec`.
pub fn make_synthetic_corpus(spec: &CorpusSpec, out: impl AsRef<Path>, force: bool) -> Result<CorpusSummary> {
    let out = out.as_ref();
    if spec.classes == 0 || spec.clips_per_class == 0 {
        return Err(Error::invalid("corpus needs at least one class and one clip per class"));
    }
    if 2 * spec.classes > crate::querybank::EMBED_DIM {
        return Err(Error::invalid("too many classes for the embedding dimension"));
    }
    let win = crate::dsp::StftConfig::default().win;
    if spec.clip_len < win {
        return Err(Error::ClipTooShort { len: spec.clip_len, min: win });
    }
    if !(spec.clip_rms.is_finite() && spec.clip_rms > 0.0) {
        return Err(Error::invalid("clip_rms must be finite and > 0"));
    }
    if let Some(level) = spec.noise_level {
        if !(level.is_finite() && level >= 0.0) {
            return Err(Error::invalid("noise_level must be finite and >= 0"));
        }
    }
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Usage(format!(
                "{} exists and is not empty (use force to overwrite)",
                out.display()
            )));
        }
    }
    let audio_dir = out.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    let labels: Vec<String> = (0..spec.classes).map(class_label).collect();
    let bands: Vec<[f64; 2]> = (0..spec.classes).map(|c| class_band(c, spec.classes)).collect();
    let class_names: Vec<String> = (0..spec.classes).map(|c| format!("class:{}", labels[c])).collect();
    let gap_names: Vec<String> = (0..spec.classes).map(|c| format!("gap:{}", labels[c])).collect();
    let all_names: Vec<String> = class_names.iter().chain(&gap_names).cloned().collect();
    let vectors = orthonormal_embeddings(&all_names, spec.seed)?;
    let templates = QueryTemplateSet::default();

    let mut bank = EmbeddingBank::new();
    let mut gap_bank = EmbeddingBank::new();
    let mut entries = Vec::new();
    for c in 0..spec.classes {
        let class_vec = &vectors[c];
        let gap_vec = rotate_toward(class_vec, &vectors[spec.classes + c], spec.gap_degrees);
        for id in templates.instantiate(&labels[c]) {
            bank.insert(id.clone(), class_vec)?;
            gap_bank.insert(id, &gap_vec)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(c as u64 + 1)));
        let n = spec.clips_per_class;
        let n_test = ((n as f64) * 0.25).round() as usize;
        let n_val = (((n as f64) * 0.125).round() as usize).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut split_of = vec![Split::Train; n];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < n_test {
                Split::Test
            } else if rank < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
        for (i, &split) in split_of.iter().enumerate() {
            let id = format!("class{c}_{i:03}");
            let clean = generate_clip(c % FAMILIES.len(), bands[c], spec.clip_len, spec.clip_rms, &mut rng);
            let clip_rel = PathBuf::from("audio").join(format!("{id}.wav"));
            let clean_rel = match spec.noise_level {
                Some(level) => {
                    let band = BACKGROUND_BANDS[rng.random_range(0..BACKGROUND_BANDS.len())];
                    let mut noise = band_noise(band, spec.clip_len, &mut rng);
                    scale_to_rms(&mut noise, spec.clip_rms * level as f64);
                    let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(a, b)| a + b).collect();
                    to_clip(&noisy)?.write_wav(out.join(&clip_rel))?;
                    let rel = PathBuf::from("audio").join(format!("{id}_clean.wav"));
                    to_clip(&clean)?.write_wav(out.join(&rel))?;
                    Some(rel)
                }
                None => {
                    to_clip(&clean)?.write_wav(out.join(&clip_rel))?;
                    None
                }
            };
            let frame_ids: Vec<String> = (0..3).map(|j| format!("{id}/frame{j}")).collect();
            for f in &frame_ids {
                bank.insert(f.clone(), class_vec)?;
                gap_bank.insert(f.clone(), class_vec)?;
            }
            entries.push(ManifestEntry {
                id,
                clip_path: clip_rel,
                clean_path: clean_rel,
                frame_ids,
                text: labels[c].clone(),
                label: Some(labels[c].clone()),
                split,
            });
        }
    }
    let manifest = Manifest::new(out, entries);
    manifest.write(out.join(MANIFEST_FILE))?;
    bank.write(out.join(BANK_FILE))?;
    gap_bank.write(out.join(GAP_BANK_FILE))?;
    let summary = CorpusSummary {
        spec: spec.clone(),
        labels,
        bands,
        clips: manifest.entries().len(),
        bank_records: bank.len(),
    };
    let path = out.join(SUMMARY_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairingOptions {
    pub count: usize,
    pub seed: u64,
    /// Interference clips with these labels are never used.
    pub exclude_labels: Vec<String>,
    /// Require target and interference labels to differ.
    pub distinct_labels: bool,
    /// Centered crop length applied to both clips.
    pub crop_len: usize,
}

impl Default for PairingOptions {
    fn default() -> Self {
        Self {
            count: 50,
            seed: 0,
            exclude_labels: Vec::new(),
            distinct_labels: true,
            crop_len: crate::dsp::TRAIN_CLIP_LEN,
        }
    }
}

/// A target/interference evaluation mixture. SDR is computed against the
/// clean target stem only.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub target_index: usize,
    pub interference_index: usize,
    pub target_id: String,
    pub interference_id: String,
    pub target_label: Option<String>,
    pub mixture: AudioClip,
    /// Clean target stem.
    pub reference: AudioClip,
}

fn center_crop(clip: &AudioClip, len: usize) -> AudioClip {
    clip.crop(clip.len().saturating_sub(len) / 2, len)
}

/// Deterministic pairing of target clips with interference clips. The
/// mixture is the target's `clip_path` audio (noisy when the corpus carries
/// background) plus the interference audio; the reference is the clean target.
pub fn eval_pairing(targets: &Dataset, interference: &Dataset, opts: &PairingOptions) -> Result<Vec<EvalPair>> {
    if targets.is_empty() || interference.is_empty() {
        return Err(Error::invalid("eval pairing needs non-empty target and interference sets"));
    }
    let mut candidates = Vec::new();
    for t in 0..targets.len() {
        for i in 0..interference.len() {
            let tl = &targets.entries[t].label;
            let il = &interference.entries[i].label;
            if il.as_ref().is_some_and(|l| opts.exclude_labels.contains(l)) {
                continue;
            }
            if targets.entries[t].id == interference.entries[i].id {
                continue;
            }
            if opts.distinct_labels && tl.is_some() && tl == il {
                continue;
            }
            candidates.push((t, i));
        }
    }
    if opts.count > candidates.len() {
        return Err(Error::invalid(format!(
            "requested {} pairs but only {} are available",
            opts.count,
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(opts.count);
    candidates
        .into_iter()
        .map(|(t, i)| {
            let target = center_crop(&targets.audio[t], opts.crop_len);
            let interf = center_crop(&interference.audio[i], opts.crop_len);
            Ok(EvalPair {
                target_index: t,
                interference_index: i,
                target_id: targets.entries[t].id.clone(),
                interference_id: interference.entries[i].id.clone(),
                target_label: targets.entries[t].label.clone(),
                mixture: AudioClip::mix(&[&target, &interf])?,
                reference: center_crop(&targets.clean[t], opts.crop_len),
            })
        })
        .collect()
}
