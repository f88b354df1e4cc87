//! The separator: a U-Net trunk emitting `k` intermediate masks, query heads
//! projecting 512-d embeddings to `k` mixing coefficients, optional noise
//! heads driven by the sum of query vectors, and the PIT/LabelSep baselines.
//!
//! Final masks are `σ(Σ_j w_j q_j M̃_j + b)`. The network sees
//! `log(1 + X)` (plus an optional normalized frequency coordinate channel),
//! zero-padded to a multiple of `2^depth` and cropped back afterwards.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{apply_mask, istft, stft, AudioClip, Grid, MagnitudeGrid, Mask};
use crate::error::{Error, Result};
use crate::losses::{objective_with_grad, predicted, LossBreakdown, LossConfig};
use crate::nn::{xavier_bound, xavier_uniform, Feature, Gradients, ParamId, ParamStore, UNet, UNetCache};
use crate::querybank::{label_embedding, QueryEmbedding, EMBED_DIM};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Clipsep,
    ClipsepNit,
    Pit,
    Labelsep,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Clipsep, Variant::ClipsepNit, Variant::Pit, Variant::Labelsep];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Clipsep => "clipsep",
            Variant::ClipsepNit => "clipsep-nit",
            Variant::Pit => "pit",
            Variant::Labelsep => "labelsep",
        }
    }

    pub fn has_query_heads(self) -> bool {
        self != Variant::Pit
    }

    pub fn has_noise_heads(self) -> bool {
        self == Variant::ClipsepNit
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "clipsep" => Ok(Variant::Clipsep),
            "clipsep-nit" | "nit" => Ok(Variant::ClipsepNit),
            "pit" => Ok(Variant::Pit),
            "labelsep" => Ok(Variant::Labelsep),
            other => Err(Error::Usage(format!(
                "unknown variant {other:?} (expected clipsep, clipsep-nit, pit or labelsep)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparatorConfig {
    /// Number of intermediate masks.
    pub k: usize,
    /// Number of sources per mixture (and of query/noise heads).
    pub n: usize,
    pub unet_depth: usize,
    pub base_channels: usize,
    pub variant: Variant,
    /// Rows of the learnable label table (LabelSep only).
    pub num_labels: usize,
    /// Feed a normalized frequency coordinate as a second input channel.
    pub freq_coord: bool,
    /// L2-normalize embeddings before projection.
    pub normalize_embeddings: bool,
    pub leaky_slope: f64,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            k: 32,
            n: 2,
            unet_depth: 7,
            base_channels: 8,
            variant: Variant::Clipsep,
            num_labels: 0,
            freq_coord: false,
            normalize_embeddings: false,
            leaky_slope: 0.2,
        }
    }
}

impl SeparatorConfig {
    /// Small trunk sized for CPU training on short crops.
    pub fn desk(variant: Variant) -> Self {
        Self {
            unet_depth: 4,
            base_channels: 8,
            freq_coord: true,
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.k < self.n {
            return Err(Error::invalid(format!("need k >= n >= 1, got k={} n={}", self.k, self.n)));
        }
        if self.unet_depth < 1 || self.unet_depth > 12 {
            return Err(Error::invalid(format!("unet_depth {} outside 1..=12", self.unet_depth)));
        }
        if self.base_channels < 1 {
            return Err(Error::invalid("base_channels must be >= 1"));
        }
        if self.variant == Variant::Labelsep && self.num_labels == 0 {
            return Err(Error::invalid("labelsep needs num_labels >= 1"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::invalid(format!("leaky_slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        1 + usize::from(self.freq_coord)
    }
}

/// Conditioning for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum QuerySource {
    Embeddings(Vec<QueryEmbedding>),
    Labels(Vec<usize>),
    Unconditioned,
}

impl QuerySource {
    fn len(&self) -> Option<usize> {
        match self {
            QuerySource::Embeddings(e) => Some(e.len()),
            QuerySource::Labels(l) => Some(l.len()),
            QuerySource::Unconditioned => None,
        }
    }
}

/// Masks from one forward pass. `noise_masks` is empty unless the model has
/// noise heads and a full set of `n` queries was supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub query_masks: Vec<Mask<T>>,
    pub noise_masks: Vec<Mask<T>>,
}

/// Replaces the predicted mask during separation.
#[derive(Clone, Copy, Debug)]
pub enum MaskOverride<'a> {
    Ones,
    Fixed(&'a Mask<f32>),
}

#[derive(Clone, Debug)]
struct MixHead {
    scale: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Head {
    /// `512×k` (shared) for query heads, `k×k` for noise heads, `k` for PIT vectors.
    proj: ParamId,
    mix: MixHead,
}

#[derive(Clone, Debug)]
pub struct SeparatorModel<T = f32> {
    config: SeparatorConfig,
    params: ParamStore<T>,
    unet: UNet,
    query_heads: Vec<Head>,
    noise_heads: Vec<Head>,
    pit_heads: Vec<Head>,
    label_table: Option<ParamId>,
}

fn sigmoid<T: Real>(z: T) -> T {
    let one = T::one();
    if z >= T::zero() {
        one / (one + (-z).exp())
    } else {
        let e = z.exp();
        e / (one + e)
    }
}

/// σ'(z), computed from `z` so it stays positive where σ(z) rounds to 1.
fn sigmoid_grad<T: Real>(z: T) -> T {
    let s = (-z.abs()).exp();
    s / ((T::one() + s) * (T::one() + s))
}

/// `σ(Σ_j scale_j q_j M̃_j + bias)` over a `k × T × F` stack of intermediate masks.
pub fn mix_masks<T: Real>(q: &[T], scale: &[T], bias: T, intermediates: &Feature<T>) -> Result<Mask<T>> {
    let k = intermediates.channels;
    if q.len() != k || scale.len() != k {
        return Err(Error::invalid(format!(
            "mixing vector lengths {}/{} do not match {k} intermediate masks",
            q.len(),
            scale.len()
        )));
    }
    let coef: Vec<T> = q.iter().zip(scale).map(|(&a, &b)| a * b).collect();
    let (_, masks) = mix_forward(&coef, &[bias], &intermediates.data, k, intermediates.plane());
    Ok(predicted(intermediates.height, intermediates.width, masks))
}

/// The displayed sum-of-sigmoids form `Σ_j σ(w_j q_j M̃_j + b)`. Values can
/// exceed 1, so this is a diagnostic grid rather than a mask.
pub fn mix_masks_literal<T: Real>(q: &[T], scale: &[T], bias: T, intermediates: &Feature<T>) -> Result<Grid<T>> {
    let k = intermediates.channels;
    if q.len() != k || scale.len() != k {
        return Err(Error::invalid("mixing vector length does not match intermediate masks"));
    }
    let plane = intermediates.plane();
    let mut out = vec![T::zero(); plane];
    for j in 0..k {
        let c = q[j] * scale[j];
        for (o, &m) in out.iter_mut().zip(intermediates.channel(j)) {
            *o += sigmoid(c * m + bias);
        }
    }
    Grid::new(intermediates.height, intermediates.width, out)
}

/// Logits and masks for `h` heads: `Z = C·M̃ + b`, `M = σ(Z)`.
fn mix_forward<T: Real>(coef: &[T], bias: &[T], inter: &[T], k: usize, cells: usize) -> (Vec<T>, Vec<T>) {
    let h = bias.len();
    let mut z = vec![T::zero(); h * cells];
    T::gemm(h, k, cells, coef, false, inter, false, &mut z, false);
    for (i, &b) in bias.iter().enumerate() {
        z[i * cells..(i + 1) * cells].iter_mut().for_each(|v| *v += b);
    }
    let m = z.iter().map(|&v| sigmoid(v)).collect();
    (z, m)
}

/// Backward of [`mix_forward`]: returns `(dC, db)` and accumulates into `dinter`.
fn mix_backward<T: Real>(
    coef: &[T],
    inter: &[T],
    logits: &[T],
    dmask: &[Vec<T>],
    k: usize,
    cells: usize,
    dinter: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let h = dmask.len();
    let mut dz = Vec::with_capacity(h * cells);
    for (i, dm) in dmask.iter().enumerate() {
        dz.extend(dm.iter().zip(&logits[i * cells..(i + 1) * cells]).map(|(&g, &z)| g * sigmoid_grad(z)));
    }
    let db = (0..h).map(|i| dz[i * cells..(i + 1) * cells].iter().copied().sum()).collect();
    let mut dc = vec![T::zero(); h * k];
    T::gemm(h, cells, k, &dz, false, inter, true, &mut dc, false);
    T::gemm(k, h, cells, coef, true, &dz, false, dinter, true);
    (dc, db)
}

struct MixPass<T> {
    /// Mixing vectors before scaling (`q` for query heads, `p` for noise heads).
    vectors: Vec<Vec<T>>,
    coef: Vec<T>,
    logits: Vec<T>,
    masks: Vec<T>,
}

struct QueryInputs<T> {
    /// Embeddings as fed to the projection (normalized when configured).
    e: Vec<Vec<T>>,
    /// Pre-normalization norms, for the normalization backward.
    norms: Vec<T>,
    labels: Option<Vec<usize>>,
}

struct Pass<T> {
    frames: usize,
    bins: usize,
    padded: (usize, usize),
    unet: UNetCache<T>,
    inter: Vec<T>,
    inputs: Option<QueryInputs<T>>,
    query: MixPass<T>,
    noise: Option<(Vec<T>, MixPass<T>)>,
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

impl<T: Real> SeparatorModel<T> {
    pub fn new(config: SeparatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let c = &config;
        let unet = UNet::new(
            &mut params,
            c.input_channels(),
            c.base_channels,
            c.unet_depth,
            c.k,
            c.leaky_slope,
            &mut rng,
        );
        let mix = |params: &mut ParamStore<T>, name: &str| MixHead {
            scale: params.add(format!("{name}.scale"), vec![c.k], vec![1.0; c.k]),
            bias: params.add(format!("{name}.bias"), vec![1], vec![0.0]),
        };
        let mut query_heads = Vec::new();
        let mut noise_heads = Vec::new();
        let mut pit_heads = Vec::new();
        if c.variant.has_query_heads() {
            // One projection layer shared by every query; scale and bias are per source.
            let proj = params.add("query.proj", vec![EMBED_DIM, c.k], xavier_uniform(&mut rng, EMBED_DIM, c.k));
            for i in 0..c.n {
                query_heads.push(Head { proj, mix: mix(&mut params, &format!("query.{i}")) });
            }
        }
        if c.variant.has_noise_heads() {
            for i in 0..c.n {
                let name = format!("noise.{i}");
                let proj = params.add(format!("{name}.proj"), vec![c.k, c.k], xavier_uniform(&mut rng, c.k, c.k));
                noise_heads.push(Head { proj, mix: mix(&mut params, &name) });
            }
        }
        if c.variant == Variant::Pit {
            let bound = xavier_bound(EMBED_DIM, c.k);
            for i in 0..c.n {
                let name = format!("pit.{i}");
                let init = (0..c.k).map(|_| rand::RngExt::random_range(&mut rng, -bound..=bound)).collect();
                let proj = params.add(format!("{name}.query"), vec![c.k], init);
                pit_heads.push(Head { proj, mix: mix(&mut params, &name) });
            }
        }
        let label_table = (c.variant == Variant::Labelsep).then(|| {
            let bound = (3.0 / EMBED_DIM as f64).sqrt();
            let init = (0..c.num_labels * EMBED_DIM)
                .map(|_| rand::RngExt::random_range(&mut rng, -bound..=bound))
                .collect();
            params.add("label.table", vec![c.num_labels, EMBED_DIM], init)
        });
        Ok(Self {
            config,
            params,
            unet,
            query_heads,
            noise_heads,
            pit_heads,
            label_table,
        })
    }

    /// Builds a model for `config` and installs `params`, which must match the
    /// expected names and shapes exactly.
    pub fn from_params(config: SeparatorConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected = model.params.tensors();
        let got = params.tensors();
        if expected.len() != got.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                got.len()
            )));
        }
        for (e, g) in expected.iter().zip(got) {
            if e.name != g.name || e.shape != g.shape {
                return Err(Error::invalid(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    e.name, e.shape, g.name, g.shape
                )));
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("loaded parameters".into()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> SeparatorModel<U> {
        SeparatorModel {
            config: self.config.clone(),
            params: self.params.cast(),
            unet: self.unet.clone(),
            query_heads: self.query_heads.clone(),
            noise_heads: self.noise_heads.clone(),
            pit_heads: self.pit_heads.clone(),
            label_table: self.label_table,
        }
    }

    /// Row `class_id` of the learnable label table (LabelSep only).
    pub fn label_embedding(&self, class_id: usize) -> Result<QueryEmbedding> {
        let id = self
            .label_table
            .ok_or_else(|| Error::Usage(format!("{} model has no label table", self.variant())))?;
        label_embedding(self.params.get(id), class_id)
    }

    fn input_feature(&self, x: &MagnitudeGrid<T>) -> Result<(Feature<T>, (usize, usize))> {
        let (t, f) = x.shape();
        if t == 0 || f == 0 {
            return Err(Error::invalid("empty magnitude grid"));
        }
        if x.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite magnitude"));
        }
        let m = 1 << self.config.unet_depth;
        let (tp, fp) = (round_up(t, m), round_up(f, m));
        let mut feat = Feature::zeros(self.config.input_channels(), tp, fp);
        for r in 0..t {
            for c in 0..f {
                feat.data[r * fp + c] = x.values()[r * f + c].ln_1p();
            }
        }
        if self.config.freq_coord {
            let denom = T::lit((f.max(2) - 1) as f64);
            let plane = tp * fp;
            for r in 0..t {
                for c in 0..f {
                    feat.data[plane + r * fp + c] = T::lit(c as f64) / denom;
                }
            }
        }
        Ok((feat, (tp, fp)))
    }

    fn run_unet(&self, x: &MagnitudeGrid<T>) -> Result<(Vec<T>, UNetCache<T>, (usize, usize))> {
        let (t, f) = x.shape();
        let (feat, padded) = self.input_feature(x)?;
        let (out, cache) = self.unet.forward(&self.params, feat);
        let k = self.config.k;
        let mut inter = Vec::with_capacity(k * t * f);
        for ch in 0..k {
            let plane = out.channel(ch);
            for r in 0..t {
                inter.extend_from_slice(&plane[r * padded.1..r * padded.1 + f]);
            }
        }
        Ok((inter, cache, padded))
    }

    /// The `k` intermediate masks for `x`, cropped to its shape.
    pub fn unet_forward(&self, x: &MagnitudeGrid<T>) -> Result<Feature<T>> {
        let (t, f) = x.shape();
        let (inter, _, _) = self.run_unet(x)?;
        Ok(Feature {
            channels: self.config.k,
            height: t,
            width: f,
            data: inter,
        })
    }

    fn prepare_embedding(&self, v: &[T]) -> (Vec<T>, T) {
        let norm = v.iter().map(|&a| a * a).sum::<T>().sqrt();
        if self.config.normalize_embeddings && norm > T::zero() {
            (v.iter().map(|&a| a / norm).collect(), norm)
        } else {
            (v.to_vec(), norm)
        }
    }

    fn project(&self, head: &Head, e: &[T]) -> Vec<T> {
        let k = self.config.k;
        let mut q = vec![T::zero(); k];
        T::gemm(1, EMBED_DIM, k, e, false, self.params.get(head.proj), false, &mut q, false);
        q
    }

    /// Query vector `q = ê·W` for query head `head`, where `ê` is the
    /// embedding (L2-normalized if configured).
    pub fn project_query(&self, e: &QueryEmbedding, head: usize) -> Result<Vec<T>> {
        let h = self
            .query_heads
            .get(head)
            .ok_or_else(|| Error::invalid(format!("query head {head} does not exist")))?;
        let v: Vec<T> = e.vector().iter().map(|&a| T::lit(a as f64)).collect();
        Ok(self.project(h, &self.prepare_embedding(&v).0))
    }

    /// Mixes `intermediates` with query head `head`'s scale and bias.
    pub fn mix_with_head(&self, q: &[T], intermediates: &Feature<T>, head: usize) -> Result<Mask<T>> {
        let h = self
            .query_heads
            .get(head)
            .ok_or_else(|| Error::invalid(format!("query head {head} does not exist")))?;
        mix_masks(q, self.params.get(h.mix.scale), self.params.get(h.mix.bias)[0], intermediates)
    }

    fn mix_pass(&self, heads: &[Head], vectors: Vec<Vec<T>>, inter: &[T], cells: usize) -> MixPass<T> {
        let k = self.config.k;
        let mut coef = Vec::with_capacity(heads.len() * k);
        let mut bias = Vec::with_capacity(heads.len());
        for (h, v) in heads.iter().zip(&vectors) {
            coef.extend(v.iter().zip(self.params.get(h.mix.scale)).map(|(&a, &b)| a * b));
            bias.push(self.params.get(h.mix.bias)[0]);
        }
        let (logits, masks) = mix_forward(&coef, &bias, inter, k, cells);
        MixPass {
            vectors,
            coef,
            logits,
            masks,
        }
    }

    fn gather_inputs(&self, queries: &QuerySource) -> Result<Option<QueryInputs<T>>> {
        let n = self.config.n;
        let check = |m: usize| {
            if m == 0 || m > n {
                Err(Error::invalid(format!("expected 1..={n} queries, got {m}")))
            } else {
                Ok(())
            }
        };
        match (self.variant(), queries) {
            (Variant::Pit, QuerySource::Unconditioned) => Ok(None),
            (Variant::Pit, _) => Err(Error::Usage("pit models take no queries".into())),
            (Variant::Labelsep, QuerySource::Labels(labels)) => {
                check(labels.len())?;
                let table = self.params.get(self.label_table.expect("labelsep has a table"));
                let mut e = Vec::new();
                let mut norms = Vec::new();
                for &l in labels {
                    if l >= self.config.num_labels {
                        return Err(Error::invalid(format!(
                            "label {l} out of range for {} labels",
                            self.config.num_labels
                        )));
                    }
                    let (v, nrm) = self.prepare_embedding(&table[l * EMBED_DIM..(l + 1) * EMBED_DIM]);
                    e.push(v);
                    norms.push(nrm);
                }
                Ok(Some(QueryInputs {
                    e,
                    norms,
                    labels: Some(labels.clone()),
                }))
            }
            (_, QuerySource::Embeddings(embs)) => {
                check(embs.len())?;
                let (e, norms) = embs
                    .iter()
                    .map(|q| {
                        let v: Vec<T> = q.vector().iter().map(|&a| T::lit(a as f64)).collect();
                        self.prepare_embedding(&v)
                    })
                    .unzip();
                Ok(Some(QueryInputs { e, norms, labels: None }))
            }
            (v, q) => Err(Error::Usage(format!("{v} model cannot be driven by {q:?}"))),
        }
    }

    fn forward_pass(&self, x: &MagnitudeGrid<T>, queries: &QuerySource) -> Result<Pass<T>> {
        let (t, f) = x.shape();
        let cells = t * f;
        let inputs = self.gather_inputs(queries)?;
        let (inter, unet, padded) = self.run_unet(x)?;
        let (query, noise) = match &inputs {
            None => {
                let vectors = self.pit_heads.iter().map(|h| self.params.get(h.proj).to_vec()).collect();
                (self.mix_pass(&self.pit_heads, vectors, &inter, cells), None)
            }
            Some(inp) => {
                let m = inp.e.len();
                let heads = &self.query_heads[..m];
                let q: Vec<Vec<T>> = heads.iter().zip(&inp.e).map(|(h, e)| self.project(h, e)).collect();
                let noise = (self.variant().has_noise_heads() && m == self.config.n).then(|| {
                    let k = self.config.k;
                    let mut qsum = vec![T::zero(); k];
                    for qi in &q {
                        qsum.iter_mut().zip(qi).for_each(|(s, &v)| *s += v);
                    }
                    let p = self
                        .noise_heads
                        .iter()
                        .map(|h| {
                            let mut out = vec![T::zero(); k];
                            T::gemm(1, k, k, &qsum, false, self.params.get(h.proj), false, &mut out, false);
                            out
                        })
                        .collect();
                    let pass = self.mix_pass(&self.noise_heads, p, &inter, cells);
                    (qsum, pass)
                });
                (self.mix_pass(heads, q, &inter, cells), noise)
            }
        };
        Ok(Pass {
            frames: t,
            bins: f,
            padded,
            unet,
            inter,
            inputs,
            query,
            noise,
        })
    }

    fn masks_of(pass: &MixPass<T>, frames: usize, bins: usize) -> Vec<Mask<T>> {
        pass.masks
            .chunks(frames * bins)
            .map(|c| predicted(frames, bins, c.to_vec()))
            .collect()
    }

    /// Forward pass for any variant. Noise masks are produced only when the
    /// model has noise heads and `n` queries are given.
    pub fn predict(&self, x: &MagnitudeGrid<T>, queries: &QuerySource) -> Result<Prediction<T>> {
        let pass = self.forward_pass(x, queries)?;
        Ok(Prediction {
            query_masks: Self::masks_of(&pass.query, pass.frames, pass.bins),
            noise_masks: pass
                .noise
                .as_ref()
                .map(|(_, p)| Self::masks_of(p, pass.frames, pass.bins))
                .unwrap_or_default(),
        })
    }

    fn require(&self, allowed: &[Variant], op: &str) -> Result<()> {
        if allowed.contains(&self.variant()) {
            Ok(())
        } else {
            Err(Error::Usage(format!("{op} is not defined for {} models", self.variant())))
        }
    }

    /// One mask per embedding, head `i` serving embedding `i`.
    pub fn forward_clipsep(&self, x: &MagnitudeGrid<T>, embeddings: &[QueryEmbedding]) -> Result<Vec<Mask<T>>> {
        self.require(&[Variant::Clipsep, Variant::Labelsep], "forward_clipsep")?;
        if self.variant() == Variant::Labelsep {
            return Err(Error::Usage("labelsep models are queried with labels".into()));
        }
        Ok(self.predict(x, &QuerySource::Embeddings(embeddings.to_vec()))?.query_masks)
    }

    /// CLIPSep forward with rows of the label table as queries.
    pub fn forward_labelsep(&self, x: &MagnitudeGrid<T>, labels: &[usize]) -> Result<Vec<Mask<T>>> {
        self.require(&[Variant::Labelsep], "forward_labelsep")?;
        Ok(self.predict(x, &QuerySource::Labels(labels.to_vec()))?.query_masks)
    }

    /// Query masks and noise masks; needs exactly `n` embeddings.
    pub fn forward_nit(
        &self,
        x: &MagnitudeGrid<T>,
        embeddings: &[QueryEmbedding],
    ) -> Result<(Vec<Mask<T>>, Vec<Mask<T>>)> {
        self.require(&[Variant::ClipsepNit], "forward_nit")?;
        if embeddings.len() != self.config.n {
            return Err(Error::invalid(format!(
                "forward_nit needs {} embeddings, got {}",
                self.config.n,
                embeddings.len()
            )));
        }
        let p = self.predict(x, &QuerySource::Embeddings(embeddings.to_vec()))?;
        Ok((p.query_masks, p.noise_masks))
    }

    pub fn forward_pit(&self, x: &MagnitudeGrid<T>) -> Result<Vec<Mask<T>>> {
        self.require(&[Variant::Pit], "forward_pit")?;
        Ok(self.predict(x, &QuerySource::Unconditioned)?.query_masks)
    }

    /// Training objective for one example: the variant's loss, with the
    /// gradient scaled by `scale` accumulated into `grads`.
    pub fn loss_and_grad(
        &self,
        x: &MagnitudeGrid<T>,
        targets: &[Mask<T>],
        queries: &QuerySource,
        cfg: &LossConfig,
        scale: T,
        grads: &mut Gradients<T>,
    ) -> Result<LossBreakdown> {
        let n = self.config.n;
        if targets.len() != n || queries.len().is_some_and(|m| m != n) {
            return Err(Error::invalid(format!("training examples need exactly {n} sources and queries")));
        }
        if targets.iter().any(|t| t.shape() != x.shape()) {
            return Err(Error::invalid("target mask shape differs from mixture"));
        }
        cfg.validate(n)?;
        let pass = self.forward_pass(x, queries)?;
        let cells = pass.frames * pass.bins;
        let split = |v: &[T]| -> Vec<Vec<T>> { v.chunks(cells).map(|c| c.to_vec()).collect() };
        let qm = split(&pass.query.masks);
        let nm = pass.noise.as_ref().map(|(_, p)| split(&p.masks)).unwrap_or_default();
        let tv: Vec<&[T]> = targets.iter().map(|t| t.values()).collect();
        let (breakdown, mg) = objective_with_grad(self.variant(), &qm, &nm, &tv, x.values(), cfg, scale)?;
        self.backward(&pass, &mg.query, &mg.noise, grads);
        Ok(breakdown)
    }

    /// Loss without gradients.
    pub fn loss(
        &self,
        x: &MagnitudeGrid<T>,
        targets: &[Mask<T>],
        queries: &QuerySource,
        cfg: &LossConfig,
    ) -> Result<LossBreakdown> {
        let pass = self.forward_pass(x, queries)?;
        let cells = pass.frames * pass.bins;
        if targets.len() != self.config.n || targets.iter().any(|t| t.shape() != x.shape()) {
            return Err(Error::invalid("targets do not match the model's source count or mixture shape"));
        }
        let split = |v: &[T]| -> Vec<Vec<T>> { v.chunks(cells).map(|c| c.to_vec()).collect() };
        let qm = split(&pass.query.masks);
        let nm = pass.noise.as_ref().map(|(_, p)| split(&p.masks)).unwrap_or_default();
        let tv: Vec<&[T]> = targets.iter().map(|t| t.values()).collect();
        Ok(objective_with_grad(self.variant(), &qm, &nm, &tv, x.values(), cfg, T::zero())?.0)
    }

    fn backward(&self, pass: &Pass<T>, dq_masks: &[Vec<T>], dn_masks: &[Vec<T>], grads: &mut Gradients<T>) {
        let k = self.config.k;
        let cells = pass.frames * pass.bins;
        let mut dinter = vec![T::zero(); k * cells];
        let m = pass.query.vectors.len();
        let mut dq: Vec<Vec<T>> = vec![vec![T::zero(); k]; m];

        if let Some((qsum, np)) = &pass.noise {
            let (dc, db) = mix_backward(&np.coef, &pass.inter, &np.logits, dn_masks, k, cells, &mut dinter);
            let mut dqsum = vec![T::zero(); k];
            for (i, h) in self.noise_heads.iter().enumerate() {
                let scale = self.params.get(h.mix.scale);
                let p = &np.vectors[i];
                let dci = &dc[i * k..(i + 1) * k];
                let dp: Vec<T> = dci.iter().zip(scale).map(|(&g, &w)| g * w).collect();
                grads.get_mut(h.mix.scale).iter_mut().zip(dci.iter().zip(p)).for_each(|(g, (&d, &v))| *g += d * v);
                grads.get_mut(h.mix.bias)[0] += db[i];
                T::gemm(k, 1, k, qsum, false, &dp, false, grads.get_mut(h.proj), true);
                T::gemm(k, k, 1, self.params.get(h.proj), false, &dp, false, &mut dqsum, true);
            }
            for d in dq.iter_mut() {
                d.iter_mut().zip(&dqsum).for_each(|(a, &b)| *a += b);
            }
        }

        let (dc, db) = mix_backward(&pass.query.coef, &pass.inter, &pass.query.logits, dq_masks, k, cells, &mut dinter);
        let heads = if pass.inputs.is_some() { &self.query_heads[..m] } else { &self.pit_heads[..] };
        for (i, h) in heads.iter().enumerate() {
            let scale = self.params.get(h.mix.scale);
            let q = &pass.query.vectors[i];
            let dci = &dc[i * k..(i + 1) * k];
            grads.get_mut(h.mix.scale).iter_mut().zip(dci.iter().zip(q)).for_each(|(g, (&d, &v))| *g += d * v);
            grads.get_mut(h.mix.bias)[0] += db[i];
            dq[i].iter_mut().zip(dci.iter().zip(scale)).for_each(|(a, (&d, &w))| *a += d * w);
        }

        match &pass.inputs {
            None => {
                for (i, h) in self.pit_heads.iter().enumerate() {
                    grads.get_mut(h.proj).iter_mut().zip(&dq[i]).for_each(|(g, &d)| *g += d);
                }
            }
            Some(inp) => {
                for (i, h) in heads.iter().enumerate() {
                    T::gemm(EMBED_DIM, 1, k, &inp.e[i], false, &dq[i], false, grads.get_mut(h.proj), true);
                }
                if let (Some(labels), Some(table)) = (&inp.labels, self.label_table) {
                    for (i, h) in heads.iter().enumerate() {
                        let mut de = vec![T::zero(); EMBED_DIM];
                        T::gemm(EMBED_DIM, k, 1, self.params.get(h.proj), false, &dq[i], false, &mut de, false);
                        if self.config.normalize_embeddings && inp.norms[i] > T::zero() {
                            // d(e/|e|) = (I − ê êᵀ)/|e|
                            let e_hat = &inp.e[i];
                            let dot: T = de.iter().zip(e_hat).map(|(&a, &b)| a * b).sum();
                            de.iter_mut().zip(e_hat).for_each(|(d, &u)| *d = (*d - dot * u) / inp.norms[i]);
                        }
                        let row = &mut grads.get_mut(table)[labels[i] * EMBED_DIM..(labels[i] + 1) * EMBED_DIM];
                        row.iter_mut().zip(&de).for_each(|(g, &d)| *g += d);
                    }
                }
            }
        }

        let (tp, fp) = pass.padded;
        let mut dout = Feature::zeros(k, tp, fp);
        for ch in 0..k {
            for r in 0..pass.frames {
                let src = &dinter[ch * cells + r * pass.bins..ch * cells + (r + 1) * pass.bins];
                dout.data[ch * tp * fp + r * fp..ch * tp * fp + r * fp + pass.bins].copy_from_slice(src);
            }
        }
        self.unet.backward(&self.params, &pass.unet, &dout, grads);
    }

    /// Raw predicted mask for one query on a mixture magnitude (query head 0).
    pub fn query_mask(&self, x: &MagnitudeGrid<T>, query: &QueryEmbedding) -> Result<Mask<T>> {
        if !self.variant().has_query_heads() {
            return Err(Error::Usage(format!("{} models take no queries", self.variant())));
        }
        let mut p = self.predict(x, &QuerySource::Embeddings(vec![query.clone()]))?;
        Ok(p.query_masks.remove(0))
    }

    /// Extracts the source described by `query` from `clip`: STFT, predicted
    /// real-valued mask on the magnitude, mixture phase, inverse STFT.
    pub fn separate(&self, clip: &AudioClip, query: &QueryEmbedding) -> Result<AudioClip> {
        self.separate_with(clip, query, None)
    }

    pub fn separate_with(
        &self,
        clip: &AudioClip,
        query: &QueryEmbedding,
        mask_override: Option<MaskOverride<'_>>,
    ) -> Result<AudioClip> {
        let spec = stft(clip)?;
        let (t, f) = spec.shape();
        let mask = match mask_override {
            Some(MaskOverride::Ones) => Mask::ones(t, f),
            Some(MaskOverride::Fixed(m)) => m.clone(),
            None => {
                let x: MagnitudeGrid<T> = spec.magnitude().cast();
                self.query_mask(&x, query)?.cast::<f32>()
            }
        };
        let masked = apply_mask(&spec, &mask)?;
        let out = istft(&masked, clip.len())?;
        AudioClip::new(out.into_samples(), clip.sample_rate())
    }
}
