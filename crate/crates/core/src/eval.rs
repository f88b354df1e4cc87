//! Separation metrics and evaluation reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EvalPair};
use crate::dsp::{apply_mask, istft, stft, AudioClip, Grid, Mask, Spectrogram};
use crate::error::{Error, Result};
use crate::model::{QuerySource, SeparatorModel, Variant};
use crate::querybank::{Modality, QueryEmbedding};

/// Magnitude cap on reported SDR values.
pub const SDR_CAP_DB: f64 = 100.0;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scale-invariant SDR in dB: the estimate is split into its projection on
/// the reference and a residual, and the ratio of their energies is taken.
/// Degenerate cases are capped at ±100 dB.
pub fn sdr(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let s = reference.samples();
    let e = estimate.samples();
    let ss = dot(s, s);
    if ss == 0.0 {
        return Err(Error::UndefinedMetric("reference is all zeros".into()));
    }
    let ee = dot(e, e);
    if ee == 0.0 {
        return Ok(-SDR_CAP_DB);
    }
    let alpha = dot(e, s) / ss;
    let target = alpha * alpha * ss;
    let residual: f64 = s
        .iter()
        .zip(e)
        .map(|(&a, &b)| {
            let r = b as f64 - alpha * a as f64;
            r * r
        })
        .sum();
    if residual == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    if target == 0.0 {
        return Ok(-SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

pub fn sdr_improvement(mixture: &AudioClip, reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    Ok(sdr(reference, estimate)? - sdr(reference, mixture)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation over √N; zero when N = 1.
    pub standard_error: f64,
}

impl SummaryStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("statistics need at least one value"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        let standard_error = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        Ok(Self {
            mean,
            median,
            standard_error,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub target_id: String,
    pub interference_id: String,
    pub sdr: f64,
    pub mixture_sdr: f64,
    pub improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub modality: Option<Modality>,
    pub count: usize,
    pub pairs: Vec<PairResult>,
    pub sdr: SummaryStats,
    pub mixture_sdr: SummaryStats,
    pub improvement: SummaryStats,
}

impl EvalReport {
    pub fn from_pairs(variant: Variant, modality: Option<Modality>, pairs: Vec<PairResult>) -> Result<Self> {
        let col = |f: fn(&PairResult) -> f64| pairs.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            variant,
            modality,
            count: pairs.len(),
            sdr: SummaryStats::from_values(&col(|p| p.sdr))?,
            mixture_sdr: SummaryStats::from_values(&col(|p| p.mixture_sdr))?,
            improvement: SummaryStats::from_values(&col(|p| p.improvement))?,
            pairs,
        })
    }

    /// Aligned table with a row for the unprocessed mixture and one for the model.
    pub fn table(&self) -> String {
        let name = match self.modality {
            Some(m) => format!("{} ({m:?} query)", self.variant).to_lowercase(),
            None => self.variant.to_string(),
        };
        let width = name.len().max(7);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>16}  {:>10}  {:>16}  {:>5}",
            "Method", "Mean SDR (dB)", "Median", "SDRi (dB)", "N"
        );
        let row = |out: &mut String, label: &str, s: &SummaryStats, i: Option<&SummaryStats>| {
            let imp = i
                .map(|i| format!("{:.2} ± {:.2}", i.mean, i.standard_error))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<width$}  {:>16}  {:>10.2}  {:>16}  {:>5}",
                label,
                format!("{:.2} ± {:.2}", s.mean, s.standard_error),
                s.median,
                imp,
                self.count
            );
        };
        row(&mut out, "Mixture", &self.mixture_sdr, None);
        row(&mut out, &name, &self.sdr, Some(&self.improvement));
        out
    }

    pub fn write(&self, json_path: &Path, table_path: Option<&Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(json_path, text).map_err(|e| Error::io(json_path, e))?;
        if let Some(p) = table_path {
            fs::write(p, self.table()).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

/// Reconstructs every masked estimate and returns the index and waveform of
/// the one scoring the highest SDR against `reference`. Oracle selection,
/// for evaluation only. Ties go to the earliest mask.
pub fn pit_oracle_select(spec: &Spectrogram, masks: &[Mask<f32>], reference: &AudioClip) -> Result<(usize, AudioClip)> {
    let mut best: Option<(usize, f64, AudioClip)> = None;
    for (i, m) in masks.iter().enumerate() {
        let est = istft(&apply_mask(spec, m)?, reference.len())?;
        let score = sdr(reference, &est)?;
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((i, score, est));
        }
    }
    best.map(|(i, _, e)| (i, e))
        .ok_or_else(|| Error::invalid("no masks to select from"))
}

/// Query used for the target of a pair under `modality`.
fn target_query(
    model: &SeparatorModel<f32>,
    targets: &Dataset,
    pair: &EvalPair,
    modality: Modality,
) -> Result<QueryEmbedding> {
    match modality {
        Modality::Label => {
            let class = targets.class_ids[pair.target_index]
                .ok_or_else(|| Error::invalid(format!("{} has no label", pair.target_id)))?;
            model.label_embedding(class)
        }
        m => targets.query(pair.target_index, m),
    }
}

/// Estimate of the target in one pair: the query head's mask for query
/// models, the oracle-selected output for PIT.
pub fn estimate_target(
    model: &SeparatorModel<f32>,
    targets: &Dataset,
    pair: &EvalPair,
    modality: Modality,
) -> Result<AudioClip> {
    if model.variant() == Variant::Pit {
        let spec = stft(&pair.mixture)?;
        let x = spec.magnitude();
        let masks = model.predict(&x, &QuerySource::Unconditioned)?.query_masks;
        return Ok(pit_oracle_select(&spec, &masks, &pair.reference)?.1);
    }
    let q = target_query(model, targets, pair, modality)?;
    model.separate(&pair.mixture, &q)
}

/// Separates every pair and summarizes SDR, mixture SDR and improvement.
/// `modality` is ignored for PIT models.
pub fn evaluate_model(
    model: &SeparatorModel<f32>,
    targets: &Dataset,
    pairs: &[EvalPair],
    modality: Modality,
) -> Result<EvalReport> {
    let modality = (model.variant() != Variant::Pit).then_some(modality);
    let results = pairs
        .iter()
        .map(|pair| {
            let est = estimate_target(model, targets, pair, modality.unwrap_or(Modality::Image))?;
            let s = sdr(&pair.reference, &est)?;
            let m = sdr(&pair.reference, &pair.mixture)?;
            Ok(PairResult {
                target_id: pair.target_id.clone(),
                interference_id: pair.interference_id.clone(),
                sdr: s,
                mixture_sdr: m,
                improvement: s - m,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_pairs(model.variant(), modality, results)
}

/// Σ_i mean(M̂ᴺ_i) for one set of noise masks.
pub fn total_noise_activation(noise_masks: &[Mask<f32>]) -> f64 {
    noise_masks.iter().map(|m| m.mean() as f64).sum()
}

/// Total noise activation averaged over `inputs`, for each model in
/// `checkpoints` (labelled by step).
pub fn noise_activation_report(
    checkpoints: &[(u64, &SeparatorModel<f32>)],
    inputs: &[(crate::dsp::MagnitudeGrid, QuerySource)],
) -> Result<Vec<(u64, f64)>> {
    if inputs.is_empty() {
        return Err(Error::invalid("noise activation needs at least one input"));
    }
    checkpoints
        .iter()
        .map(|&(step, model)| {
            if !model.variant().has_noise_heads() {
                return Err(Error::Usage(format!("{} models have no noise heads", model.variant())));
            }
            let mut total = 0.0;
            for (x, q) in inputs {
                let pred = model.predict(x, q)?;
                if pred.noise_masks.is_empty() {
                    return Err(Error::Usage("noise masks need a full set of queries".into()));
                }
                total += total_noise_activation(&pred.noise_masks);
            }
            Ok((step, total / inputs.len() as f64))
        })
        .collect()
}

/// Grayscale PNG of a grid with low frequencies at the bottom. With `log`
/// the values are shown as dB over an 80 dB range, otherwise clamped to [0, 1].
pub fn write_grid_png(path: &Path, grid: &Grid<f32>, log: bool) -> Result<()> {
    let (t, f) = grid.shape();
    let vals: Vec<f32> = if log {
        let db: Vec<f32> = grid.values().iter().map(|&v| 20.0 * v.max(1e-8).log10()).collect();
        let top = db.iter().copied().fold(f32::MIN, f32::max);
        db.iter().map(|&d| ((d - top + 80.0) / 80.0).clamp(0.0, 1.0)).collect()
    } else {
        grid.values().iter().map(|&v| v.clamp(0.0, 1.0)).collect()
    };
    let img = image::GrayImage::from_fn(t as u32, f as u32, |x, y| {
        let bin = f - 1 - y as usize;
        image::Luma([(vals[x as usize * f + bin] * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

/// Writes mixture, target, estimate and noise-head panels for one pair.
pub fn dump_pair_pngs(
    dir: &Path,
    model: &SeparatorModel<f32>,
    targets: &Dataset,
    pair: &EvalPair,
    modality: Modality,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mix = stft(&pair.mixture)?.magnitude();
    write_grid_png(&dir.join("mixture.png"), &mix, true)?;
    write_grid_png(&dir.join("target.png"), &stft(&pair.reference)?.magnitude(), true)?;
    let est = estimate_target(model, targets, pair, modality)?;
    write_grid_png(&dir.join("estimate.png"), &stft(&est)?.magnitude(), true)?;
    if model.variant().has_noise_heads() {
        let q = target_query(model, targets, pair, modality)?;
        let n = model.config().n;
        let queries = QuerySource::Embeddings(vec![q; n]);
        for (i, m) in model.predict(&mix, &queries)?.noise_masks.iter().enumerate() {
            write_grid_png(&dir.join(format!("noise_head_{i}.png")), m, false)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(v: Vec<f32>) -> AudioClip {
        AudioClip::new(v, SAMPLE_RATE).unwrap()
    }

    fn sine(len: usize, hz: f32) -> Vec<f32> {
        (0..len)
            .map(|i| (std::f32::consts::TAU * hz * i as f32 / SAMPLE_RATE as f32).sin())
            .collect()
    }

    #[test]
    fn sdr_boundaries() {
        let s = clip(sine(4000, 440.0));
        assert_eq!(sdr(&s, &s).unwrap(), SDR_CAP_DB);
        assert_eq!(sdr(&s, &clip(vec![0.0; 4000])).unwrap(), -SDR_CAP_DB);
        assert!(matches!(sdr(&clip(vec![0.0; 4000]), &s), Err(Error::UndefinedMetric(_))));
        assert!(sdr(&s, &clip(vec![0.0; 10])).is_err());
    }

    #[test]
    fn sdr_orthogonal_construction() {
        let s = sine(4000, 440.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut noise: Vec<f32> = (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ss = dot(&s, &s);
        let proj = dot(&noise, &s) / ss;
        noise.iter_mut().zip(&s).for_each(|(n, &a)| *n -= (proj * a as f64) as f32);
        let scale = ((ss / 10.0) / dot(&noise, &noise)).sqrt() as f32;
        let est: Vec<f32> = s.iter().zip(&noise).map(|(&a, &n)| a + scale * n).collect();
        let v = sdr(&clip(s.clone()), &clip(est.clone())).unwrap();
        assert!((v - 10.0).abs() < 0.1, "{v}");
        for alpha in [0.01f32, 0.5, 3.0, 100.0] {
            let scaled: Vec<f32> = est.iter().map(|x| x * alpha).collect();
            assert!((sdr(&clip(s.clone()), &clip(scaled)).unwrap() - v).abs() < 1e-4);
        }
    }

    #[test]
    fn improvement_identities() {
        let s = clip(sine(4000, 300.0));
        let mix = clip(s.samples().iter().zip(sine(4000, 2000.0)).map(|(a, b)| a + 0.5 * b).collect());
        assert_eq!(sdr_improvement(&mix, &s, &mix).unwrap(), 0.0);
        let m = sdr(&s, &mix).unwrap();
        assert_eq!(sdr_improvement(&mix, &s, &s).unwrap(), SDR_CAP_DB - m);
    }

    #[test]
    fn oracle_band_mask_improves_by_15_db() {
        let a = clip(sine(16000, 300.0));
        let b = clip(sine(16000, 3000.0));
        let mix = AudioClip::mix(&[&a, &b]).unwrap();
        let spec = stft(&mix).unwrap();
        let mags = [stft(&a).unwrap().magnitude(), stft(&b).unwrap().magnitude()];
        let masks = crate::dsp::ground_truth_masks(&mags, crate::dsp::MaskKind::Binary).unwrap();
        let est = istft(&apply_mask(&spec, &masks[0]).unwrap(), mix.len()).unwrap();
        let imp = sdr_improvement(&mix, &a, &est).unwrap();
        assert!(imp > 15.0, "{imp}");
    }

    #[test]
    fn stats_self_consistent() {
        let s = SummaryStats::from_values(&[3.0]).unwrap();
        assert_eq!((s.mean, s.median, s.standard_error), (3.0, 3.0, 0.0));
        let v = [1.0, 2.0, 4.0, 7.0];
        let s = SummaryStats::from_values(&v).unwrap();
        assert_eq!(s.mean, 3.5);
        assert_eq!(s.median, 3.0);
        let sd = ((2.5f64.powi(2) + 1.5f64.powi(2) + 0.5f64.powi(2) + 3.5f64.powi(2)) / 3.0).sqrt();
        assert!((s.standard_error - sd / 2.0).abs() < 1e-12);
        assert!(SummaryStats::from_values(&[]).is_err());
    }

    #[test]
    fn pit_selection_rules() {
        let a = clip(sine(8000, 300.0));
        let b = clip(sine(8000, 3000.0));
        let mix = AudioClip::mix(&[&a, &b]).unwrap();
        let spec = stft(&mix).unwrap();
        let (t, f) = spec.shape();
        let zero = Mask::zeros(t, f);
        let one = Mask::ones(t, f);
        assert_eq!(pit_oracle_select(&spec, &[zero.clone(), one.clone()], &a).unwrap().0, 1);
        let mags = [stft(&a).unwrap().magnitude(), stft(&b).unwrap().magnitude()];
        let gt = crate::dsp::ground_truth_masks(&mags, crate::dsp::MaskKind::Binary).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy: Mask = Mask::from_values(t, f, (0..t * f).map(|_| rng.random_range(0.0..1.0)).collect(), crate::dsp::MaskKind::Predicted).unwrap();
        let list = vec![gt[1].clone(), noisy.clone(), gt[0].clone()];
        let (_, fwd) = pit_oracle_select(&spec, &list, &a).unwrap();
        let rev: Vec<_> = list.iter().rev().cloned().collect();
        let (_, back) = pit_oracle_select(&spec, &rev, &a).unwrap();
        assert_eq!(fwd, back);
        let scores: Vec<f64> = list
            .iter()
            .map(|m| sdr(&a, &istft(&apply_mask(&spec, m).unwrap(), a.len()).unwrap()).unwrap())
            .collect();
        let best = scores.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(sdr(&a, &fwd).unwrap(), best);
    }

    #[test]
    fn activation_arithmetic() {
        assert_eq!(total_noise_activation(&[Mask::zeros(3, 4), Mask::zeros(3, 4)]), 0.0);
        let c = Mask::from_values(3, 4, vec![0.3; 12], crate::dsp::MaskKind::Predicted).unwrap();
        assert!((total_noise_activation(&[c.clone(), c]) - 0.6).abs() < 1e-6);
        let model = SeparatorModel::<f32>::new(crate::model::SeparatorConfig::desk(Variant::Clipsep), 0).unwrap();
        let x = crate::dsp::MagnitudeGrid::from_values(4, 513, vec![0.1; 4 * 513]).unwrap();
        let r = noise_activation_report(&[(0, &model)], &[(x, QuerySource::Unconditioned)]);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn report_table_and_png() {
        let pairs = vec![PairResult {
            target_id: "a".into(),
            interference_id: "b".into(),
            sdr: 4.0,
            mixture_sdr: 1.0,
            improvement: 3.0,
        }];
        let r = EvalReport::from_pairs(Variant::ClipsepNit, Some(Modality::Text), pairs).unwrap();
        assert_eq!(r.count, 1);
        assert_eq!(r.improvement.standard_error, 0.0);
        let table = r.table();
        assert!(table.contains("Mixture") && table.contains("clipsep-nit"));
        let dir = tempfile::tempdir().unwrap();
        r.write(&dir.path().join("r.json"), Some(&dir.path().join("r.txt"))).unwrap();
        let back: EvalReport = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let g = Grid::new(3, 5, (0..15).map(|i| i as f32).collect()).unwrap();
        let p = dir.path().join("g.png");
        write_grid_png(&p, &g, true).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (3, 5));
    }
}
