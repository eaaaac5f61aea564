//! Lexical encoder: hashed character n-gram TF-IDF features followed by a
//! trainable linear projection `W` of shape `h x p`.
//!
//! The span being encoded contributes character n-grams (lowercased, padded
//! with boundary markers). When a sentence context is supplied, the words
//! around the span contribute features in a separate namespace: span
//! features occupy even hash indices and context features odd ones, so the
//! two never collide. Each block is L2-normalised; when both are present
//! they are scaled by `1/sqrt(2)` so the whole vector has unit norm.
//!
//! `W` is stored sparsely. A row that has never been updated is generated on
//! demand from `(seed, row)` with values uniform in `[-sqrt(3/p), sqrt(3/p)]`,
//! which makes the default `h = 2^18` affordable. At that scale the
//! untrained projection preserves feature inner products in expectation.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MentionContext;
use crate::kb::Kb;

const SPAN_START: char = '\u{2}';
const SPAN_END: char = '\u{3}';
const CHECKPOINT_MAGIC: &[u8; 8] = b"HDLKENC\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot featurize an empty surface string")]
    EmptySurface,
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature (hash) dimension `h`.
    pub hash_dim: usize,
    /// Projection dimension `p`.
    pub proj_dim: usize,
    pub ngram_sizes: Vec<usize>,
    /// Words taken on each side of the span.
    pub context_window: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hash_dim: 1 << 18,
            proj_dim: 128,
            ngram_sizes: vec![2, 3],
            context_window: 6,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.hash_dim < 2 || self.hash_dim > u32::MAX as usize {
            return bad("hash_dim must be in [2, 2^32)");
        }
        if self.proj_dim == 0 || self.proj_dim > self.hash_dim {
            return bad("proj_dim must be in [1, hash_dim]");
        }
        if self.ngram_sizes.is_empty() || self.ngram_sizes.contains(&0) {
            return bad("ngram_sizes must be non-empty and positive");
        }
        Ok(())
    }
}

/// Sparse feature vector with sorted, unique indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    /// Builds a vector from arbitrary entries, summing repeated indices.
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut map: BTreeMap<u32, f64> = BTreeMap::new();
        for (i, v) in entries {
            *map.entry(i).or_insert(0.0) += v;
        }
        FeatureVector {
            dim,
            entries: map.into_iter().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (a, b) = (self.entries[i], other.entries[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &FeatureVector, beta: f64) -> FeatureVector {
        FeatureVector::from_entries(
            self.dim,
            self.entries
                .iter()
                .map(|&(i, v)| (i, alpha * v))
                .chain(other.entries.iter().map(|&(i, v)| (i, beta * v))),
        )
    }
}

/// Dense embedding of dimension `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }
}

/// Plain left-to-right inner product. Retrieval and its tests rely on this
/// exact summation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-major `rows x cols` matrix of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn from_rows(cols: usize, rows: Vec<Embedding>) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * cols);
        for r in rows {
            debug_assert_eq!(r.dim(), cols);
            data.extend(r.0);
        }
        EmbeddingMatrix { rows: n, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Feature hash: 64-bit FNV-1a over the namespace tag and the gram.
fn fnv1a(namespace: u8, gram: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in std::iter::once(namespace).chain(gram.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn span_index(gram: &str, dim: usize) -> u32 {
    let half = (dim / 2) as u64;
    (2 * (fnv1a(0, gram) % half)) as u32
}

fn context_index(word: &str, dim: usize) -> u32 {
    let half = (dim / 2) as u64;
    (2 * (fnv1a(1, word) % half) + 1) as u32
}

/// Character n-grams of the lowercased, whitespace-collapsed span with
/// boundary markers, in order of appearance.
pub(crate) fn span_ngrams(text: &str, sizes: &[usize]) -> Vec<String> {
    let mut padded = vec![SPAN_START];
    let mut prev_space = false;
    for c in text.trim().chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !prev_space {
                padded.push(' ');
            }
            prev_space = true;
        } else {
            padded.push(c);
            prev_space = false;
        }
    }
    padded.push(SPAN_END);
    let mut out = Vec::new();
    for &n in sizes {
        if padded.len() >= n {
            out.extend(padded.windows(n).map(|w| w.iter().collect::<String>()));
        }
    }
    out
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Lowercased words within `window` words on either side of the span.
pub(crate) fn context_words(ctx: &MentionContext<'_>, window: usize) -> Vec<String> {
    let chars: Vec<char> = ctx.sentence.chars().collect();
    let (s, e) = (ctx.span.0.min(chars.len()), ctx.span.1.min(chars.len()));
    let left: String = chars[..s].iter().collect();
    let right: String = chars[e..].iter().collect();
    let left = words(&left);
    let right = words(&right);
    let mut out: Vec<String> = left[left.len().saturating_sub(window)..].to_vec();
    out.extend(right.into_iter().take(window));
    out
}

fn normalize_block(block: &mut [(u32, f64)]) {
    let norm = block.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, v) in block.iter_mut() {
            *v /= norm;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder {
    config: EncoderConfig,
    /// Inverse document frequency of span features seen in the KB names.
    idf: HashMap<u32, f64>,
    /// Number of names the IDF table was computed over.
    idf_docs: usize,
    /// Rows of `W` that differ from (or were explicitly set over) their
    /// seeded initial value.
    rows: HashMap<u32, Vec<f64>>,
}

impl LinearEncoder {
    /// Creates an encoder whose IDF table is computed over `names`.
    pub fn new<'a>(
        config: EncoderConfig,
        names: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut df: HashMap<u32, usize> = HashMap::new();
        let mut docs = 0;
        for name in names {
            docs += 1;
            let mut seen: Vec<u32> = span_ngrams(name, &config.ngram_sizes)
                .iter()
                .map(|g| span_index(g, config.hash_dim))
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for i in seen {
                *df.entry(i).or_insert(0) += 1;
            }
        }
        let n = docs as f64;
        let idf = df
            .into_iter()
            .map(|(i, d)| (i, ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0))
            .collect();
        Ok(LinearEncoder {
            config,
            idf,
            idf_docs: docs,
            rows: HashMap::new(),
        })
    }

    pub fn from_kb(config: EncoderConfig, kb: &Kb) -> Result<Self, EncoderError> {
        Self::new(config, kb.records().iter().map(|r| r.name.as_str()))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hash_dim(&self) -> usize {
        self.config.hash_dim
    }

    pub fn proj_dim(&self) -> usize {
        self.config.proj_dim
    }

    fn idf_of(&self, idx: u32) -> f64 {
        self.idf
            .get(&idx)
            .copied()
            .unwrap_or_else(|| (1.0 + self.idf_docs as f64).ln() + 1.0)
    }

    pub fn featurize(
        &self,
        text: &str,
        context: Option<&MentionContext<'_>>,
    ) -> Result<FeatureVector, EncoderError> {
        if text.trim().is_empty() {
            return Err(EncoderError::EmptySurface);
        }
        let h = self.config.hash_dim;
        let mut span: BTreeMap<u32, f64> = BTreeMap::new();
        for g in span_ngrams(text, &self.config.ngram_sizes) {
            *span.entry(span_index(&g, h)).or_insert(0.0) += 1.0;
        }
        let mut span: Vec<(u32, f64)> = span
            .into_iter()
            .map(|(i, tf)| (i, tf * self.idf_of(i)))
            .collect();
        normalize_block(&mut span);

        let mut ctx_block: Vec<(u32, f64)> = Vec::new();
        if let Some(ctx) = context {
            let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
            for w in context_words(ctx, self.config.context_window) {
                *counts.entry(context_index(&w, h)).or_insert(0.0) += 1.0;
            }
            ctx_block = counts.into_iter().collect();
            normalize_block(&mut ctx_block);
        }
        if !ctx_block.is_empty() {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            for (_, v) in span.iter_mut().chain(ctx_block.iter_mut()) {
                *v *= s;
            }
        }
        span.extend(ctx_block);
        span.sort_unstable_by_key(|(i, _)| *i);
        Ok(FeatureVector { dim: h, entries: span })
    }

    fn init_row(&self, idx: u32) -> Vec<f64> {
        let bound = (3.0 / self.config.proj_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::from(idx));
        let dist = Uniform::new_inclusive(-bound, bound);
        (0..self.config.proj_dim).map(|_| dist.sample(&mut rng)).collect()
    }

    /// Row `idx` of `W`.
    pub fn row(&self, idx: u32) -> Cow<'_, [f64]> {
        match self.rows.get(&idx) {
            Some(r) => Cow::Borrowed(r),
            None => Cow::Owned(self.init_row(idx)),
        }
    }

    /// Overwrites row `idx` of `W`.
    pub fn set_row(&mut self, idx: u32, values: Vec<f64>) -> Result<(), EncoderError> {
        if values.len() != self.config.proj_dim {
            return Err(EncoderError::DimensionMismatch {
                expected: self.config.proj_dim,
                got: values.len(),
            });
        }
        if idx as usize >= self.config.hash_dim {
            return Err(EncoderError::DimensionMismatch {
                expected: self.config.hash_dim,
                got: idx as usize + 1,
            });
        }
        self.rows.insert(idx, values);
        Ok(())
    }

    /// Replaces all of `W` with a dense row-major `h x p` matrix.
    pub fn set_dense_weights(&mut self, w: &[f64]) -> Result<(), EncoderError> {
        let (h, p) = (self.config.hash_dim, self.config.proj_dim);
        if w.len() != h * p {
            return Err(EncoderError::DimensionMismatch {
                expected: h * p,
                got: w.len(),
            });
        }
        self.rows = (0..h)
            .map(|i| (i as u32, w[i * p..(i + 1) * p].to_vec()))
            .collect();
        Ok(())
    }

    /// `W <- W - lr * grad` for the given sparse rows.
    pub fn apply_gradient(&mut self, grad: &BTreeMap<u32, Vec<f64>>, lr: f64) {
        for (&idx, g) in grad {
            if !self.rows.contains_key(&idx) {
                let init = self.init_row(idx);
                self.rows.insert(idx, init);
            }
            let row = self.rows.get_mut(&idx).expect("materialised above");
            for (w, d) in row.iter_mut().zip(g) {
                *w -= lr * d;
            }
        }
    }

    /// `W^T fv`.
    pub fn encode(&self, fv: &FeatureVector) -> Result<Embedding, EncoderError> {
        if fv.dim != self.config.hash_dim {
            return Err(EncoderError::DimensionMismatch {
                expected: self.config.hash_dim,
                got: fv.dim,
            });
        }
        let mut out = vec![0.0; self.config.proj_dim];
        for &(idx, v) in &fv.entries {
            let row = self.row(idx);
            for (o, w) in out.iter_mut().zip(row.iter()) {
                *o += v * w;
            }
        }
        Ok(Embedding(out))
    }

    /// Featurizes and encodes a string in one go.
    pub fn embed(
        &self,
        text: &str,
        context: Option<&MentionContext<'_>>,
    ) -> Result<Embedding, EncoderError> {
        self.encode(&self.featurize(text, context)?)
    }

    /// One embedding per KB record, in record order.
    pub fn encode_kb(&self, kb: &Kb) -> Result<EmbeddingMatrix, EncoderError> {
        let rows = kb
            .records()
            .par_iter()
            .map(|r| self.embed(&r.name, None))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EmbeddingMatrix::from_rows(self.config.proj_dim, rows))
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Binary container: magic, version, JSON config header, IDF table and
    /// materialised rows of `W`, all little-endian and sorted by index.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), EncoderError> {
        let header = serde_json::to_vec(&self.config).map_err(|e| EncoderError::Format(e.to_string()))?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        out.write_u32::<LittleEndian>(header.len() as u32)?;
        out.write_all(&header)?;
        out.write_u64::<LittleEndian>(self.idf_docs as u64)?;

        let mut idf: Vec<(u32, f64)> = self.idf.iter().map(|(&i, &v)| (i, v)).collect();
        idf.sort_unstable_by_key(|(i, _)| *i);
        out.write_u64::<LittleEndian>(idf.len() as u64)?;
        for (i, v) in idf {
            out.write_u32::<LittleEndian>(i)?;
            out.write_f64::<LittleEndian>(v)?;
        }

        let mut rows: Vec<(&u32, &Vec<f64>)> = self.rows.iter().collect();
        rows.sort_unstable_by_key(|(i, _)| **i);
        out.write_u64::<LittleEndian>(rows.len() as u64)?;
        for (i, r) in rows {
            out.write_u32::<LittleEndian>(*i)?;
            for v in r {
                out.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, EncoderError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(EncoderError::Format("not an encoder checkpoint".into()));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(EncoderError::Format(format!("unsupported version {version}")));
        }
        let len = input.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; len];
        input.read_exact(&mut header)?;
        let config: EncoderConfig =
            serde_json::from_slice(&header).map_err(|e| EncoderError::Format(e.to_string()))?;
        config.validate()?;
        let idf_docs = input.read_u64::<LittleEndian>()? as usize;

        let n_idf = input.read_u64::<LittleEndian>()?;
        let mut idf = HashMap::with_capacity(n_idf as usize);
        for _ in 0..n_idf {
            let i = input.read_u32::<LittleEndian>()?;
            idf.insert(i, input.read_f64::<LittleEndian>()?);
        }

        let n_rows = input.read_u64::<LittleEndian>()?;
        let mut rows = HashMap::with_capacity(n_rows as usize);
        for _ in 0..n_rows {
            let i = input.read_u32::<LittleEndian>()?;
            if i as usize >= config.hash_dim {
                return Err(EncoderError::Format(format!("row {i} outside hash_dim")));
            }
            let mut r = vec![0.0; config.proj_dim];
            for v in r.iter_mut() {
                *v = input.read_f64::<LittleEndian>()?;
            }
            rows.insert(i, r);
        }
        Ok(LinearEncoder {
            config,
            idf,
            idf_docs,
            rows,
        })
    }
}
