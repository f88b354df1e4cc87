//! Waveform and time-frequency primitives: STFT/iSTFT with centered Hann
//! framing, mask application, ideal binary / ratio masks and WAV I/O.

use std::ops::Deref;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub const SAMPLE_RATE: u32 = 16_000;
/// Clip length used for full-scale training.
pub const TRAIN_CLIP_LEN: usize = 65_535;
pub const RATIO_MASK_EPS: f64 = 1e-8;
const WINDOW_SUM_FLOOR: f32 = 1e-8;

/// Mono waveform at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silent(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `len` samples starting at `start`; zero-padded past the end.
    pub fn crop(&self, start: usize, len: usize) -> AudioClip {
        let mut out = vec![0.0; len];
        if start < self.samples.len() {
            let avail = (self.samples.len() - start).min(len);
            out[..avail].copy_from_slice(&self.samples[start..start + avail]);
        }
        AudioClip {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }

    /// Sample-wise sum. Lengths must match; no normalization or clipping.
    pub fn mix(clips: &[&AudioClip]) -> Result<AudioClip> {
        let first = clips
            .first()
            .ok_or_else(|| Error::invalid("cannot mix zero clips"))?;
        let mut out = vec![0.0f32; first.len()];
        for c in clips {
            if c.len() != first.len() || c.sample_rate != first.sample_rate {
                return Err(Error::invalid("mixed clips differ in length or rate"));
            }
            for (o, s) in out.iter_mut().zip(&c.samples) {
                *o += s;
            }
        }
        Ok(AudioClip {
            samples: out,
            sample_rate: first.sample_rate,
        })
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }

    /// Reads 16-bit PCM or 32-bit float WAV at 16 kHz; multichannel input is
    /// averaged down to mono.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.sample_rate != SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "{}: sample rate {} Hz unsupported (expected {SAMPLE_RATE})",
                path.display(),
                spec.sample_rate
            )));
        }
        let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 / 32768.0))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?,
            (hound::SampleFormat::Float, 32) => reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?,
            (fmt, bits) => {
                return Err(Error::invalid(format!(
                    "{}: unsupported sample format {fmt:?}/{bits} bits",
                    path.display()
                )))
            }
        };
        let channels = spec.channels.max(1) as usize;
        let samples = if channels == 1 {
            interleaved
        } else {
            interleaved
                .chunks_exact(channels)
                .map(|frame| frame.iter().sum::<f32>() / channels as f32)
                .collect()
        };
        AudioClip::new(samples, spec.sample_rate)
    }

    /// Writes mono 32-bit float WAV (lossless for the stored samples).
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            writer.write_sample(s).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }
}

/// Row-major `frames × bins` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T = f32> {
    frames: usize,
    bins: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(frames: usize, bins: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::invalid(format!(
                "grid data has {} values, expected {frames}x{bins}",
                data.len()
            )));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn filled(frames: usize, bins: usize, value: T) -> Self {
        Self {
            frames,
            bins,
            data: vec![value; frames * bins],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn into_values(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, frame: usize, bin: usize) -> T {
        self.data[frame * self.bins + bin]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl<T: Real> Grid<T> {
    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::lit(self.data.len() as f64)
    }

    pub fn cast<U: Real>(&self) -> Grid<U> {
        self.map(|x| U::lit(x.f64()))
    }
}

/// Non-negative finite magnitudes (the mixture `X` or a source `|S_i|`).
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeGrid<T = f32>(Grid<T>);

impl<T: Real> MagnitudeGrid<T> {
    pub fn new(grid: Grid<T>) -> Result<Self> {
        if let Some(i) = grid.data.iter().position(|x| !x.is_finite() || *x < T::zero()) {
            return Err(Error::invalid(format!(
                "magnitude value {} at index {i} is negative or non-finite",
                grid.data[i]
            )));
        }
        Ok(Self(grid))
    }

    pub fn from_values(frames: usize, bins: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Grid::new(frames, bins, data)?)
    }

    pub fn into_grid(self) -> Grid<T> {
        self.0
    }

    pub fn cast<U: Real>(&self) -> MagnitudeGrid<U> {
        MagnitudeGrid(self.0.cast())
    }
}

impl<T> Deref for MagnitudeGrid<T> {
    type Target = Grid<T>;
    fn deref(&self) -> &Grid<T> {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Binary,
    Ratio,
    Predicted,
}

/// Time-frequency mask with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask<T = f32> {
    grid: Grid<T>,
    kind: MaskKind,
}

impl<T: Real> Mask<T> {
    pub fn new(grid: Grid<T>, kind: MaskKind) -> Result<Self> {
        for (i, &v) in grid.data.iter().enumerate() {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::invalid(format!("mask value {v} at index {i} outside [0,1]")));
            }
            if kind == MaskKind::Binary && v != T::zero() && v != T::one() {
                return Err(Error::invalid(format!("binary mask value {v} at index {i}")));
            }
        }
        Ok(Self { grid, kind })
    }

    pub fn from_values(frames: usize, bins: usize, data: Vec<T>, kind: MaskKind) -> Result<Self> {
        Self::new(Grid::new(frames, bins, data)?, kind)
    }

    pub fn ones(frames: usize, bins: usize) -> Self {
        Self {
            grid: Grid::filled(frames, bins, T::one()),
            kind: MaskKind::Binary,
        }
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            grid: Grid::filled(frames, bins, T::zero()),
            kind: MaskKind::Binary,
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn cast<U: Real>(&self) -> Mask<U> {
        Mask {
            grid: self.grid.cast(),
            kind: self.kind,
        }
    }

    /// Crate-internal constructor for values already known to be in range.
    pub(crate) fn from_trusted(frames: usize, bins: usize, data: Vec<T>, kind: MaskKind) -> Self {
        debug_assert_eq!(data.len(), frames * bins);
        Self {
            grid: Grid { frames, bins, data },
            kind,
        }
    }
}

impl<T> Deref for Mask<T> {
    type Target = Grid<T>;
    fn deref(&self) -> &Grid<T> {
        &self.grid
    }
}

/// Complex STFT frames (`frames × bins`, bins = `n_fft/2 + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    sample_rate: u32,
    data: Vec<Complex<f32>>,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, sample_rate: u32, data: Vec<Complex<f32>>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::invalid("spectrogram data does not match its shape"));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram entry".into()));
        }
        Ok(Self {
            frames,
            bins,
            sample_rate,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn values(&self) -> &[Complex<f32>] {
        &self.data
    }

    pub fn magnitude(&self) -> MagnitudeGrid<f32> {
        MagnitudeGrid(Grid {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().map(|c| c.norm()).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            win: 1024,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count under centered framing.
    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Samples needed so that centered framing yields exactly `frames` frames.
    pub fn len_for_frames(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f32> {
    (0..len)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / len as f64;
            (0.5 - 0.5 * x.cos()) as f32
        })
        .collect()
}

/// Planned STFT processor (centered framing, reflection padding of
/// `n_fft/2` on each side, Hann analysis and synthesis windows).
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f32>,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        if cfg.n_fft < 2 || cfg.hop == 0 || cfg.win == 0 || cfg.win > cfg.n_fft || !cfg.n_fft.is_multiple_of(2) {
            return Err(Error::invalid(format!("bad STFT configuration {cfg:?}")));
        }
        let mut window = vec![0.0; cfg.n_fft];
        let offset = (cfg.n_fft - cfg.win) / 2;
        window[offset..offset + cfg.win].copy_from_slice(&hann_window(cfg.win));
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window,
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn forward(&self, clip: &AudioClip) -> Result<Spectrogram> {
        let n = self.cfg.n_fft;
        let pad = n / 2;
        let len = clip.len();
        if len < self.cfg.win || len <= pad {
            return Err(Error::ClipTooShort {
                len,
                min: self.cfg.win.max(pad + 1),
            });
        }
        let x = clip.samples();
        let reflect = |i: isize| -> f32 {
            let last = len as isize - 1;
            let mut j = i;
            if j < 0 {
                j = -j;
            }
            if j > last {
                j = 2 * last - j;
            }
            x[j as usize]
        };
        let frames = self.cfg.frames_for(len);
        let bins = self.cfg.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0f32, 0.0); n];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * self.cfg.hop) as isize - pad as isize;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(reflect(start + j as isize) * self.window[j], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
        Spectrogram::new(frames, bins, clip.sample_rate(), data)
    }

    /// Overlap-add inverse with squared-window normalization; the result is
    /// truncated or zero-padded to `target_len`.
    pub fn inverse(&self, spec: &Spectrogram, target_len: usize) -> Result<AudioClip> {
        let n = self.cfg.n_fft;
        let hop = self.cfg.hop;
        let bins = self.cfg.bins();
        if spec.frames == 0 {
            return Err(Error::invalid("spectrogram has no frames"));
        }
        if spec.bins != bins {
            return Err(Error::invalid(format!(
                "spectrogram has {} bins, STFT expects {bins}",
                spec.bins
            )));
        }
        let total = n + hop * (spec.frames - 1);
        let mut out = vec![0.0f32; total];
        let mut wsum = vec![0.0f32; total];
        let mut buf = vec![Complex::new(0.0f32, 0.0); n];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); self.inverse.get_inplace_scratch_len()];
        let scale = 1.0 / n as f32;
        for t in 0..spec.frames {
            let row = &spec.data[t * bins..(t + 1) * bins];
            buf[0] = Complex::new(row[0].re, 0.0);
            buf[n / 2] = Complex::new(row[n / 2].re, 0.0);
            for f in 1..n / 2 {
                buf[f] = row[f];
                buf[n - f] = row[f].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let base = t * hop;
            for j in 0..n {
                let w = self.window[j];
                out[base + j] += buf[j].re * scale * w;
                wsum[base + j] += w * w;
            }
        }
        for (o, w) in out.iter_mut().zip(&wsum) {
            if *w > WINDOW_SUM_FLOOR {
                *o /= *w;
            }
        }
        let pad = n / 2;
        let mut samples = vec![0.0f32; target_len];
        let avail = total.saturating_sub(pad).min(target_len);
        samples[..avail].copy_from_slice(&out[pad..pad + avail]);
        AudioClip::new(samples, spec.sample_rate)
    }
}

fn default_stft() -> &'static Stft {
    static STFT: OnceLock<Stft> = OnceLock::new();
    STFT.get_or_init(|| Stft::new(StftConfig::default()).expect("default STFT config is valid"))
}

/// STFT with the default 1024/256/1024 configuration.
pub fn stft(clip: &AudioClip) -> Result<Spectrogram> {
    default_stft().forward(clip)
}

/// Inverse of [`stft`].
pub fn istft(spec: &Spectrogram, target_len: usize) -> Result<AudioClip> {
    default_stft().inverse(spec, target_len)
}

/// Scales each bin's magnitude by the mask, keeping the phase of `spec`.
pub fn apply_mask(spec: &Spectrogram, mask: &Mask<f32>) -> Result<Spectrogram> {
    if spec.shape() != mask.shape() {
        return Err(Error::invalid(format!(
            "mask shape {:?} does not match spectrogram {:?}",
            mask.shape(),
            spec.shape()
        )));
    }
    let data = spec
        .data
        .iter()
        .zip(mask.values())
        .map(|(c, &m)| c * m)
        .collect();
    Ok(Spectrogram {
        frames: spec.frames,
        bins: spec.bins,
        sample_rate: spec.sample_rate,
        data,
    })
}

/// Ideal masks for a set of sources. Binary masks assign each bin to the
/// source with the largest magnitude (ties go to the lowest index); ratio
/// masks are `|S_i| / (Σ_j |S_j| + ε)`.
pub fn ground_truth_masks<T: Real>(sources: &[MagnitudeGrid<T>], kind: MaskKind) -> Result<Vec<Mask<T>>> {
    let first = sources
        .first()
        .ok_or_else(|| Error::invalid("no sources given for ground-truth masks"))?;
    let shape = first.shape();
    if sources.iter().any(|s| s.shape() != shape) {
        return Err(Error::invalid("source grids differ in shape"));
    }
    let cells = shape.0 * shape.1;
    let mut out: Vec<Vec<T>> = vec![vec![T::zero(); cells]; sources.len()];
    match kind {
        MaskKind::Binary => {
            for c in 0..cells {
                let mut best = 0;
                for (i, s) in sources.iter().enumerate().skip(1) {
                    if s.values()[c] > sources[best].values()[c] {
                        best = i;
                    }
                }
                out[best][c] = T::one();
            }
        }
        MaskKind::Ratio => {
            let eps = T::lit(RATIO_MASK_EPS);
            for c in 0..cells {
                let total: T = sources.iter().map(|s| s.values()[c]).sum();
                for (i, s) in sources.iter().enumerate() {
                    out[i][c] = (s.values()[c] / (total + eps)).min(T::one()).max(T::zero());
                }
            }
        }
        MaskKind::Predicted => {
            return Err(Error::invalid("ground-truth masks are binary or ratio"));
        }
    }
    Ok(out
        .into_iter()
        .map(|data| Mask::from_trusted(shape.0, shape.1, data, kind))
        .collect())
}
