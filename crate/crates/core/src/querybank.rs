//! Query embeddings: the `QEMBANK1` bank format that stands in for a frozen
//! image/text encoder, multi-frame and multi-template averaging, learnable
//! label rows, and deterministic orthonormal embeddings for synthetic corpora.
//!
//! Bank layout (all integers little-endian):
//!
//! ```text
//! "QEMBANK1" | u32 dim | u32 count | count × (u16 id_len, id bytes, dim × f32) | JSON footer
//! ```
//!
//! The footer repeats the index (`{"dim", "count", "index": {id: offset}}`) and
//! is checked against the records on load.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub const EMBED_DIM: usize = 512;
const MAGIC: &[u8; 8] = b"QEMBANK1";
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    vector: Vec<f32>,
    modality: Modality,
    id: String,
}

impl QueryEmbedding {
    pub fn new(vector: Vec<f32>, modality: Modality, id: impl Into<String>) -> Result<Self> {
        if vector.len() != EMBED_DIM {
            return Err(Error::invalid(format!(
                "embedding has dimension {}, expected {EMBED_DIM}",
                vector.len()
            )));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding entry".into()));
        }
        Ok(Self {
            vector,
            modality,
            id: id.into(),
        })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

#[derive(Serialize, Deserialize)]
struct Footer {
    dim: usize,
    count: usize,
    index: BTreeMap<String, u64>,
}

/// Immutable-after-load map from string id to a 512-dimensional vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingBank {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        EMBED_DIM
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<()> {
        let id = id.into();
        if vector.len() != EMBED_DIM {
            return Err(Error::invalid(format!(
                "vector for {id:?} has dimension {}, expected {EMBED_DIM}",
                vector.len()
            )));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::invalid("embedding id longer than 65535 bytes"));
        }
        if self.index.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate embedding id {id:?}")));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding {id:?}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.data[i * EMBED_DIM..(i + 1) * EMBED_DIM])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4 + self.ids.len() * 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(EMBED_DIM as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        let mut index = BTreeMap::new();
        for (i, id) in self.ids.iter().enumerate() {
            index.insert(id.clone(), out.len() as u64);
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in &self.data[i * EMBED_DIM..(i + 1) * EMBED_DIM] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let footer = Footer {
            dim: EMBED_DIM,
            count: self.ids.len(),
            index,
        };
        out.extend_from_slice(&serde_json::to_vec(&footer).expect("footer serializes"));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: &str| Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(0, "truncated header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(fmt(0, "bad magic, expected QEMBANK1"));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim != EMBED_DIM {
            return Err(fmt(8, &format!("dimension {dim}, expected {EMBED_DIM}")));
        }
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let mut bank = EmbeddingBank::new();
        let mut pos = HEADER_LEN;
        let mut offsets = BTreeMap::new();
        let mut vector = vec![0.0f32; EMBED_DIM];
        for r in 0..count {
            let start = pos;
            if pos + 2 > bytes.len() {
                return Err(fmt(pos, &format!("truncated record {r}")));
            }
            let id_len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
            pos += 2;
            if pos + id_len + 4 * EMBED_DIM > bytes.len() {
                return Err(fmt(start, &format!("truncated record {r}")));
            }
            let id = std::str::from_utf8(&bytes[pos..pos + id_len])
                .map_err(|_| fmt(pos, "id is not valid UTF-8"))?
                .to_string();
            pos += id_len;
            for v in vector.iter_mut() {
                *v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
                pos += 4;
            }
            if bank.contains(&id) {
                return Err(fmt(start, &format!("duplicate id {id:?}")));
            }
            bank.insert(id.clone(), &vector)
                .map_err(|e| fmt(start, &e.to_string()))?;
            offsets.insert(id, start as u64);
        }
        let footer: Footer = serde_json::from_slice(&bytes[pos..])
            .map_err(|e| fmt(pos, &format!("bad index footer: {e}")))?;
        if footer.dim != EMBED_DIM || footer.count != count || footer.index != offsets {
            return Err(fmt(pos, "index footer disagrees with records"));
        }
        Ok(bank)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Builds a bank from JSON lines of the form `{"id": ..., "vector": [...]}`.
    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            vector: Vec<f32>,
        }
        let mut bank = EmbeddingBank::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<jsonl>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Line = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("line {}: {e}", n + 1)))?;
            bank.insert(rec.id, &rec.vector)
                .map_err(|e| Error::invalid(format!("line {}: {e}", n + 1)))?;
        }
        Ok(bank)
    }

    fn mean_of<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<f32>> {
        if ids.is_empty() {
            return Err(Error::invalid("no embedding ids given"));
        }
        let missing: Vec<String> = ids
            .iter()
            .filter(|id| !self.contains(id.as_ref()))
            .map(|id| id.as_ref().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingIds(missing));
        }
        let mut acc = vec![0.0f64; EMBED_DIM];
        for id in ids {
            for (a, &v) in acc.iter_mut().zip(self.get(id.as_ref()).unwrap()) {
                *a += v as f64;
            }
        }
        let n = ids.len() as f64;
        Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
    }
}

/// Mean embedding of the frames extracted around a clip's center.
pub fn frame_query<S: AsRef<str>>(bank: &EmbeddingBank, frame_ids: &[S]) -> Result<QueryEmbedding> {
    let vector = bank.mean_of(frame_ids)?;
    let id = frame_ids
        .iter()
        .map(|s| s.as_ref())
        .collect::<Vec<_>>()
        .join("+");
    QueryEmbedding::new(vector, Modality::Image, id)
}

/// Text prompt templates with a single `{}` placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTemplateSet {
    templates: Vec<String>,
}

impl Default for QueryTemplateSet {
    fn default() -> Self {
        Self {
            templates: vec![
                "a photo of {}".into(),
                "a photo of the small {}".into(),
                "a low resolution photo of a {}".into(),
                "a photo of many {}".into(),
            ],
        }
    }
}

impl QueryTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::invalid("template set is empty"));
        }
        if let Some(t) = templates.iter().find(|t| t.matches("{}").count() != 1) {
            return Err(Error::invalid(format!("template {t:?} needs exactly one {{}} placeholder")));
        }
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn instantiate(&self, user_text: &str) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| t.replacen("{}", user_text, 1))
            .collect()
    }
}

/// Mean embedding over all template instantiations of `user_text`.
pub fn text_query(bank: &EmbeddingBank, user_text: &str, templates: &QueryTemplateSet) -> Result<QueryEmbedding> {
    let ids = templates.instantiate(user_text);
    let vector = bank.mean_of(&ids)?;
    QueryEmbedding::new(vector, Modality::Text, user_text)
}

/// Reads row `class_id` of a `rows × 512` label table.
pub fn label_embedding<T: Real>(table: &[T], class_id: usize) -> Result<QueryEmbedding> {
    let rows = table.len() / EMBED_DIM;
    if class_id >= rows {
        return Err(Error::invalid(format!(
            "class id {class_id} out of range for {rows} labels"
        )));
    }
    let vector = table[class_id * EMBED_DIM..(class_id + 1) * EMBED_DIM]
        .iter()
        .map(|v| v.f64() as f32)
        .collect();
    QueryEmbedding::new(vector, Modality::Label, format!("label:{class_id}"))
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Orthonormal unit vectors, one per name, from Gram-Schmidt over Gaussian
/// draws seeded by each name's hash. Earlier names fix the basis for later
/// ones, so extending the list never changes existing vectors.
pub fn orthonormal_embeddings(names: &[String], seed: u64) -> Result<Vec<Vec<f32>>> {
    if names.len() > EMBED_DIM {
        return Err(Error::invalid(format!(
            "at most {EMBED_DIM} orthonormal vectors fit in {EMBED_DIM} dimensions"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    for name in names {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(name) ^ seed);
        let mut v: Vec<f64> = (0..EMBED_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Two passes of modified Gram-Schmidt for numerical orthogonality.
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    Ok(basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect())
}

/// Rotates unit vector `e` by `degrees` toward unit vector `u` (assumed
/// orthogonal to `e`).
pub fn rotate_toward(e: &[f32], u: &[f32], degrees: f64) -> Vec<f32> {
    let (s, c) = degrees.to_radians().sin_cos();
    e.iter()
        .zip(u)
        .map(|(&a, &b)| (c * a as f64 + s * b as f64) as f32)
        .collect()
}
