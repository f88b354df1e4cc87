//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Set `ACCEPTANCE_CRITERIA=1,5,10` to run a
//! subset.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clipsep_core::checkpoint::save_checkpoint;
use clipsep_core::data::{
    eval_pairing, make_synthetic_corpus, CorpusSpec, Dataset, EvalPair, Manifest, PairingOptions, Split, BANK_FILE,
    GAP_BANK_FILE, MANIFEST_FILE,
};
use clipsep_core::dsp::{ground_truth_masks, istft, stft, SAMPLE_RATE};
use clipsep_core::eval::{evaluate_model, EvalReport};
use clipsep_core::losses::{nit_loss, noise_reg, pit_loss, wbce};
use clipsep_core::nn::Gradients;
use clipsep_core::train::{lr_at, TrainConfig, Trainer, ValMetrics};
use clipsep_core::{
    AudioClip, EmbeddingBank, LossConfig, MagnitudeGrid, Mask, MaskKind, Modality, QueryEmbedding, QuerySource,
    QueryTemplateSet, SeparatorConfig, SeparatorModel, Variant, EMBED_DIM,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const TRAIN_STEPS: u64 = 2000;
const BATCH: usize = 4;
const EVAL_PAIRS: usize = 50;
const EVAL_CROP: usize = 16_000;
const EVAL_SEED: u64 = 1;
const CLIPS_PER_CLASS: usize = 24;
const NOISE_LEVEL: f32 = 0.5;
const NOISY_CLIP_RMS: f64 = 0.005;
const SEEDS: [u64; 3] = [0, 1, 2];
/// Validations averaged for the converged noise activation (the last quarter of training).
const CONVERGED_VALIDATIONS: usize = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Criterion = fn(&mut Context) -> Outcome;

struct Corpus {
    dir: PathBuf,
    train: Dataset,
    val: Dataset,
    test: Dataset,
    pairs: Vec<EvalPair>,
}

struct Context {
    root: tempfile::TempDir,
    clean: Option<Corpus>,
    noisy: Option<Corpus>,
    clean_model: Option<SeparatorModel<f32>>,
    nit_runs: Vec<(u64, f64, SeparatorModel<f32>, Vec<ValMetrics>)>,
}

fn load_corpus(dir: &Path, bank_file: &str, pairing: &PairingOptions) -> Corpus {
    let manifest = Manifest::load(dir.join(MANIFEST_FILE)).unwrap();
    let bank = EmbeddingBank::load(dir.join(bank_file)).unwrap();
    let templates = QueryTemplateSet::default();
    let load = |split| Dataset::load(&manifest, split, Some(&bank), &templates).unwrap();
    let test = load(Split::Test);
    let pairs = eval_pairing(&test, &test, pairing).unwrap();
    Corpus {
        dir: dir.to_path_buf(),
        train: load(Split::Train),
        val: load(Split::Val),
        test,
        pairs,
    }
}

fn eval_options() -> PairingOptions {
    PairingOptions {
        count: EVAL_PAIRS,
        seed: EVAL_SEED,
        crop_len: EVAL_CROP,
        ..PairingOptions::default()
    }
}

impl Context {
    fn corpus(&mut self, noisy: bool) -> &Corpus {
        let slot = if noisy { &mut self.noisy } else { &mut self.clean };
        if slot.is_none() {
            let dir = self.root.path().join(if noisy { "noisy" } else { "clean" });
            let spec = CorpusSpec {
                classes: 4,
                clips_per_class: CLIPS_PER_CLASS,
                noise_level: noisy.then_some(NOISE_LEVEL),
                clip_rms: if noisy { NOISY_CLIP_RMS } else { CorpusSpec::default().clip_rms },
                ..CorpusSpec::default()
            };
            make_synthetic_corpus(&spec, &dir, false).unwrap();
            *slot = Some(load_corpus(&dir, BANK_FILE, &eval_options()));
        }
        slot.as_ref().unwrap()
    }

    fn train(&mut self, noisy: bool, variant: Variant, gamma: f64, seed: u64) -> (SeparatorModel<f32>, Vec<ValMetrics>) {
        let corpus = self.corpus(noisy);
        let mut cfg = TrainConfig::desk(variant, TRAIN_STEPS);
        cfg.batch_size = BATCH;
        cfg.gamma = gamma;
        cfg.seed = seed;
        let mut trainer =
            Trainer::new(cfg, SeparatorConfig::desk(variant), corpus.train.clone(), &corpus.val, None).unwrap();
        let summary = trainer.run().unwrap();
        (trainer.into_model(), summary.validations)
    }

    fn evaluate(&mut self, noisy: bool, model: &SeparatorModel<f32>) -> EvalReport {
        let c = self.corpus(noisy);
        evaluate_model(model, &c.test, &c.pairs, Modality::Image).unwrap()
    }

    fn clean_model(&mut self) -> SeparatorModel<f32> {
        if self.clean_model.is_none() {
            let (model, _) = self.train(false, Variant::Clipsep, 0.25, 0);
            self.clean_model = Some(model);
        }
        self.clean_model.clone().unwrap()
    }

    fn nit_run(&mut self, gamma: f64, seed: u64) -> (SeparatorModel<f32>, Vec<ValMetrics>) {
        if let Some((_, _, m, v)) = self.nit_runs.iter().find(|r| r.0 == seed && r.1 == gamma) {
            return (m.clone(), v.clone());
        }
        let (m, v) = self.train(true, Variant::ClipsepNit, gamma, seed);
        self.nit_runs.push((seed, gamma, m.clone(), v.clone()));
        (m, v)
    }
}

// Independent oracles. These recompute the losses directly from their
// definitions without going through the library's permutation search.

fn oracle_wbce(target: &[f64], pred: &[f64], x: &[f64]) -> f64 {
    let eps = 1e-7;
    let sum: f64 = target
        .iter()
        .zip(pred)
        .zip(x)
        .map(|((&m, &p), &w)| {
            let p = p.clamp(eps, 1.0 - eps);
            w * (-(m * p.ln()) - (1.0 - m) * (1.0 - p).ln())
        })
        .sum();
    sum / target.len() as f64
}

/// Heap's algorithm, independent of the library's lexicographic enumeration.
fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k.is_multiple_of(2) {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

fn oracle_nit(q: &[Vec<f64>], z: &[Vec<f64>], y: &[Vec<f64>], x: &[f64]) -> f64 {
    all_permutations(q.len())
        .iter()
        .map(|p| {
            (0..q.len())
                .map(|i| {
                    let combined: Vec<f64> = q[i].iter().zip(&z[p[i]]).map(|(a, b)| (a + b).min(1.0)).collect();
                    oracle_wbce(&y[i], &combined, x)
                })
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

fn oracle_pit(preds: &[Vec<f64>], y: &[Vec<f64>], x: &[f64]) -> f64 {
    all_permutations(preds.len())
        .iter()
        .map(|p| (0..preds.len()).map(|i| oracle_wbce(&y[i], &preds[p[i]], x)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

fn random_values(rng: &mut ChaCha8Rng, len: usize, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(0.0..hi)).collect()
}

fn to_masks(t: usize, f: usize, values: &[Vec<f64>], kind: MaskKind) -> Vec<Mask<f64>> {
    values.iter().map(|v| Mask::from_values(t, f, v.clone(), kind).unwrap()).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn criterion_1(_: &mut Context) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=3usize);
        let (t, f) = (rng.random_range(1..=8usize), rng.random_range(1..=8usize));
        let cells = t * f;
        let q: Vec<Vec<f64>> = (0..n).map(|_| random_values(&mut rng, cells, 1.0)).collect();
        let z: Vec<Vec<f64>> = (0..n).map(|_| random_values(&mut rng, cells, 1.0)).collect();
        let y: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..cells).map(|_| f64::from(rng.random_bool(0.5))).collect())
            .collect();
        let x = random_values(&mut rng, cells, 3.0);
        let grid = MagnitudeGrid::from_values(t, f, x.clone()).unwrap();
        let (qm, zm) = (to_masks(t, f, &q, MaskKind::Predicted), to_masks(t, f, &z, MaskKind::Predicted));
        let ym = to_masks(t, f, &y, MaskKind::Binary);
        let nit = nit_loss(&qm, &zm, &ym, &grid).unwrap();
        let pit = pit_loss(&qm, &ym, &grid).unwrap();
        worst = worst
            .max(rel_err(nit.loss, oracle_nit(&q, &z, &y, &x)))
            .max(rel_err(pit.loss, oracle_pit(&q, &y, &x)));
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst <= 1e-10 && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:.2e} over 200 instances in {:.2}s", elapsed.as_secs_f64()),
    )
}

fn criterion_2(_: &mut Context) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (t, f) = (rng.random_range(1..=8usize), rng.random_range(1..=8usize));
        let cells = t * f;
        let vals = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..2).map(|_| random_values(rng, cells, 1.0)).collect() };
        let (q, z) = (vals(&mut rng), vals(&mut rng));
        let y: Vec<Vec<f64>> = (0..2).map(|_| (0..cells).map(|_| f64::from(rng.random_bool(0.5))).collect()).collect();
        let x = MagnitudeGrid::from_values(t, f, random_values(&mut rng, cells, 3.0)).unwrap();
        let (qm, zm) = (to_masks(t, f, &q, MaskKind::Predicted), to_masks(t, f, &z, MaskKind::Predicted));
        let ym = to_masks(t, f, &y, MaskKind::Binary);
        let combine = |a: &[f64], b: &[f64]| -> Mask<f64> {
            Mask::from_values(t, f, a.iter().zip(b).map(|(u, v)| (u + v).min(1.0)).collect(), MaskKind::Predicted).unwrap()
        };
        let arrangement_1 = wbce(&ym[0], &combine(&q[0], &z[0]), &x).unwrap() + wbce(&ym[1], &combine(&q[1], &z[1]), &x).unwrap();
        let arrangement_2 = wbce(&ym[0], &combine(&q[0], &z[1]), &x).unwrap() + wbce(&ym[1], &combine(&q[1], &z[0]), &x).unwrap();
        let got = nit_loss(&qm, &zm, &ym, &x).unwrap().loss;
        if got != arrangement_1.min(arrangement_2) {
            mismatches += 1;
        }
    }
    Outcome::new(mismatches == 0, format!("{mismatches}/100 instances differ from min(arrangement 1, arrangement 2)"))
}

fn criterion_3(_: &mut Context) -> Outcome {
    let gamma = 0.25;
    let (t, f) = (4, 5);
    let mut failures = Vec::new();
    // Hinge values at 20 grid points of the total mean activation.
    for i in 0..20 {
        let total = i as f64 * 0.1;
        let each = total / 2.0;
        let masks = to_masks(t, f, &[vec![each; t * f], vec![each; t * f]], MaskKind::Predicted);
        let r: f64 = noise_reg(&masks, gamma);
        let expected = (total - gamma).max(0.0);
        if (r - expected).abs() > 1e-12 {
            failures.push(format!("sum {total:.1}: {r} vs {expected}"));
        }
    }
    // Subgradient: zero below the threshold, 1/(T*F) per element above it.
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let h = 1e-7;
    let mut checks = 0;
    for (lo, hi, active) in [(0.0, 0.2, false), (0.4, 1.0, true)] {
        for _ in 0..5 {
            let vals: Vec<Vec<f64>> = (0..2).map(|_| (0..t * f).map(|_| rng.random_range(lo..hi)).collect()).collect();
            let head = rng.random_range(0..2usize);
            let cell = rng.random_range(0..t * f);
            let eval = |d: f64| {
                let mut v = vals.clone();
                v[head][cell] += d;
                noise_reg::<f64>(&to_masks(t, f, &v, MaskKind::Predicted), gamma)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let expected = if active { 1.0 / (t * f) as f64 } else { 0.0 };
            if (fd - expected).abs() > 1e-6 {
                failures.push(format!("subgradient {fd} vs {expected}"));
            }
            checks += 1;
        }
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("20 hinge points and {checks} subgradient checks agree")
        } else {
            failures.join("; ")
        },
    )
}

fn criterion_4(_: &mut Context) -> Outcome {
    let start = Instant::now();
    let cfg = SeparatorConfig {
        k: 4,
        n: 2,
        unet_depth: 2,
        base_channels: 2,
        variant: Variant::ClipsepNit,
        num_labels: 0,
        freq_coord: true,
        normalize_embeddings: false,
        leaky_slope: 0.2,
    };
    let model = SeparatorModel::<f64>::new(cfg, 404).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let (t, f) = (16, 16);
    let sources: Vec<MagnitudeGrid<f64>> = (0..2)
        .map(|_| MagnitudeGrid::from_values(t, f, random_values(&mut rng, t * f, 2.0)).unwrap())
        .collect();
    let x = MagnitudeGrid::from_values(t, f, sources[0].values().iter().zip(sources[1].values()).map(|(a, b)| a + b).collect())
        .unwrap();
    let targets = ground_truth_masks(&sources, MaskKind::Binary).unwrap();
    let queries = QuerySource::Embeddings(
        (0..2)
            .map(|i| {
                let v: Vec<f32> = (0..EMBED_DIM).map(|j| ((i * 7 + j) as f32 * 0.61).sin() * 0.1).collect();
                QueryEmbedding::new(v, Modality::Image, format!("q{i}")).unwrap()
            })
            .collect(),
    );
    // Put the regularizer in its active region so its subgradient is exercised.
    let pred = model.predict(&x, &queries).unwrap();
    let noise_total: f64 = pred.noise_masks.iter().map(|m| m.mean()).sum();
    let loss_cfg = LossConfig {
        gamma: noise_total / 2.0,
        ..LossConfig::default()
    };
    let mut grads = Gradients::zeros_like(model.params());
    let breakdown = model.loss_and_grad(&x, &targets, &queries, &loss_cfg, 1.0, &mut grads).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (ti, tensor) in model.params().tensors().iter().enumerate() {
        let idx = rng.random_range(0..tensor.data.len());
        let eval = |d: f64| {
            let mut m = model.clone();
            m.params_mut().tensors_mut()[ti].data[idx] += d;
            m.loss(&x, &targets, &queries, &loss_cfg).unwrap().total
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let an = grads.tensors()[ti][idx];
        if (fd - an).abs() > 1e-9 {
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
        }
        checked += 1;
    }
    let elapsed = start.elapsed();
    Outcome::new(
        checked >= 20 && worst < 1e-3 && breakdown.reg > 0.0 && elapsed < Duration::from_secs(60),
        format!(
            "{checked} parameters, max relative error {worst:.2e}, regularizer {:.4}, {:.1}s",
            breakdown.reg,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_5(_: &mut Context) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let len = rng.random_range(4096..32_000usize);
        let samples: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let clip = AudioClip::new(samples, SAMPLE_RATE).unwrap();
        let back = istft(&stft(&clip).unwrap(), len).unwrap();
        let edge = 1024;
        let (mut sig, mut err) = (0.0f64, 0.0f64);
        for (a, b) in clip.samples()[edge..len - edge].iter().zip(&back.samples()[edge..len - edge]) {
            sig += f64::from(*a).powi(2);
            err += (f64::from(*a) - f64::from(*b)).powi(2);
        }
        worst = worst.min(10.0 * (sig / err.max(1e-300)).log10());
    }
    Outcome::new(worst > 40.0, format!("minimum interior SNR {worst:.1} dB over 100 clips"))
}

fn criterion_6(ctx: &mut Context) -> Outcome {
    let start = Instant::now();
    let model = ctx.clean_model();
    let report = ctx.evaluate(false, &model);
    Outcome::new(
        report.improvement.mean >= 5.0,
        format!(
            "mean SDR improvement {:.2} ± {:.2} dB (SDR {:.2} dB) on {} pairs after {TRAIN_STEPS} steps, {:.0}s",
            report.improvement.mean,
            report.improvement.standard_error,
            report.sdr.mean,
            report.count,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn converged_activation(vals: &[ValMetrics]) -> f64 {
    let tail = &vals[vals.len().saturating_sub(CONVERGED_VALIDATIONS)..];
    tail.iter().map(|v| v.total_noise_activation.unwrap()).sum::<f64>() / tail.len() as f64
}

fn criterion_7(ctx: &mut Context) -> Outcome {
    let start = Instant::now();
    let (model, vals) = ctx.nit_run(0.25, SEEDS[0]);
    let report = ctx.evaluate(true, &model);
    let act_25 = converged_activation(&vals);
    let (_, vals_10) = ctx.nit_run(0.1, SEEDS[0]);
    let act_10 = converged_activation(&vals_10);
    let pass = report.improvement.mean >= 3.0 && (act_25 - 0.25).abs() <= 0.1 && (act_10 - 0.1).abs() <= 0.1;
    Outcome::new(
        pass,
        format!(
            "gamma 0.25: SDR improvement {:.2} dB, activation {act_25:.3}; gamma 0.1: activation {act_10:.3}; {:.0}s",
            report.improvement.mean,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_8(ctx: &mut Context) -> Outcome {
    let start = Instant::now();
    let (mut nit, mut plain) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let (m, _) = ctx.nit_run(0.25, seed);
        nit.push(ctx.evaluate(true, &m).sdr.mean);
        let (m, _) = ctx.train(true, Variant::Clipsep, 0.25, seed);
        plain.push(ctx.evaluate(true, &m).sdr.mean);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&nit), mean(&plain));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
    Outcome::new(
        a > b,
        format!(
            "NIT {a:.2} dB [{}] vs CLIPSep {b:.2} dB [{}] over seeds {SEEDS:?}; {:.0}s",
            fmt(&nit),
            fmt(&plain),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_9(ctx: &mut Context) -> Outcome {
    let model = ctx.clean_model();
    let dir = ctx.corpus(false).dir.clone();
    let gap = load_corpus(&dir, GAP_BANK_FILE, &eval_options());
    let clean = ctx.corpus(false);
    let image = evaluate_model(&model, &clean.test, &clean.pairs, Modality::Image).unwrap();
    let text_gap = evaluate_model(&model, &gap.test, &gap.pairs, Modality::Text).unwrap();
    // In the base bank text and image vectors coincide.
    let text_zero = evaluate_model(&model, &clean.test, &clean.pairs, Modality::Text).unwrap();
    let identical = text_zero.pairs == image.pairs && text_zero.sdr == image.sdr;
    Outcome::new(
        text_gap.sdr.mean <= image.sdr.mean && identical,
        format!(
            "image {:.2} dB, text with 15 degree gap {:.2} dB, zero-gap reports identical: {identical}",
            image.sdr.mean, text_gap.sdr.mean
        ),
    )
}

fn criterion_10(_: &mut Context) -> Outcome {
    let cfg = TrainConfig::default();
    let points = [(0u64, 0.0), (5000, 1e-3), (100_000, 1e-4), (200_000, 1e-4)];
    let got: Vec<f64> = points.iter().map(|&(s, _)| lr_at(s, &cfg)).collect();
    let pass = points.iter().zip(&got).all(|(&(_, want), &g)| g == want);
    Outcome::new(pass, format!("lr at 0/5000/100000/200000 = {got:?}"))
}

fn hash_tree(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(fs::read(&p).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), hex));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(root: &Path) -> Vec<(String, String)> {
    let corpus_dir = root.join("corpus");
    let spec = CorpusSpec {
        classes: 3,
        clips_per_class: 6,
        clip_len: 24_000,
        noise_level: Some(NOISE_LEVEL),
        seed: 11,
        ..CorpusSpec::default()
    };
    make_synthetic_corpus(&spec, &corpus_dir, false).unwrap();
    let pairing = PairingOptions {
        count: 6,
        seed: 3,
        crop_len: 8000,
        ..PairingOptions::default()
    };
    let c = load_corpus(&corpus_dir, BANK_FILE, &pairing);
    let run = root.join("run");
    let mut cfg = TrainConfig::desk(Variant::ClipsepNit, 40);
    cfg.batch_size = 2;
    cfg.validate_every = 20;
    cfg.val_examples = 4;
    cfg.seed = 5;
    let mut trainer = Trainer::new(cfg, SeparatorConfig::desk(Variant::ClipsepNit), c.train.clone(), &c.val, Some(&run)).unwrap();
    trainer.run().unwrap();
    let model = trainer.into_model();
    save_checkpoint(&model, run.join("copy.ckpt")).unwrap();
    let report = evaluate_model(&model, &c.test, &c.pairs, Modality::Image).unwrap();
    report.write(&root.join("report.json"), Some(&root.join("report.txt"))).unwrap();
    hash_tree(root)
}

fn criterion_11(ctx: &mut Context) -> Outcome {
    let a = pipeline(&ctx.root.path().join("pipeline_a"));
    let b = pipeline(&ctx.root.path().join("pipeline_b"));
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let has = |name: &str| a.iter().any(|(p, _)| p.ends_with(name));
    let covered = has("final.ckpt") && has("report.json") && has("manifest.jsonl");
    Outcome::new(
        a.len() == b.len() && differing.is_empty() && covered,
        format!("{} files compared, differing: {differing:?}", a.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Criterion); 11] = [
        (1, "loss oracle equivalence", criterion_1),
        (2, "noise-invariant arrangement identity", criterion_2),
        (3, "regularizer hinge", criterion_3),
        (4, "gradient verification", criterion_4),
        (5, "STFT round trip", criterion_5),
        (6, "desk-scale separation", criterion_6),
        (7, "noise soaking", criterion_7),
        (8, "noise-invariant vs plain on noisy data", criterion_8),
        (9, "modality gap direction", criterion_9),
        (10, "learning-rate schedule", criterion_10),
        (11, "determinism", criterion_11),
    ];
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // `cargo test <filter>` passes the filter as an argument; skip the suite when it is filtered out.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    let mut ctx = Context {
        root: tempfile::tempdir().unwrap(),
        clean: None,
        noisy: None,
        clean_model: None,
        nit_runs: Vec::new(),
    };
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let outcome = run(&mut ctx);
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {status} {name}: {}", outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
