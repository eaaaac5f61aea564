//! Exact inner-product search over KB name embeddings and training
//! candidate pools with candidate sharing.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use thiserror::Error;

use crate::encoder::{dot, Embedding, EmbeddingMatrix};
use crate::kb::{EntityId, Kb};

const INDEX_MAGIC: &[u8; 8] = b"HDLKIDX\0";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding matrix has {rows} rows but the KB has {records} records")]
    ShapeMismatch { rows: usize, records: usize },
    #[error("query has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("pool size must be even")]
    OddPoolSize,
    #[error("non-finite score for uid {0}")]
    NonFinite(i64),
    #[error("index file does not match the KB: {0}")]
    KbMismatch(String),
    #[error("index I/O: {0}")]
    Io(#[from] io::Error),
    #[error("malformed index file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexRecord {
    pub uid: i64,
    pub identifier: EntityId,
    pub name: String,
}

/// Flat index over one embedding per KB record. Immutable once built; a
/// re-encode produces a new index with a higher generation.
#[derive(Debug, Clone, PartialEq)]
pub struct NameIndex {
    records: Vec<IndexRecord>,
    embeddings: EmbeddingMatrix,
    by_name: HashMap<String, BTreeSet<EntityId>>,
    generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Kb,
    Shared,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Kb => "kb",
            Provenance::Shared => "shared",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Row in the index (and in the KB record list).
    pub row: usize,
    pub uid: i64,
    pub name: String,
    pub identifier: EntityId,
    pub score: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    /// Mention position within its document.
    pub mention: usize,
    pub candidates: Vec<Candidate>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.candidates.iter().filter(|c| c.provenance == p).count()
    }
}

/// Descending score, then ascending uid.
fn rank_order(a: (f64, i64), b: (f64, i64)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

pub fn build_index(embeddings: EmbeddingMatrix, kb: &Kb) -> Result<NameIndex, RetrievalError> {
    NameIndex::new(embeddings, kb, 0)
}

impl NameIndex {
    pub fn new(embeddings: EmbeddingMatrix, kb: &Kb, generation: u64) -> Result<Self, RetrievalError> {
        if embeddings.rows != kb.len() {
            return Err(RetrievalError::ShapeMismatch {
                rows: embeddings.rows,
                records: kb.len(),
            });
        }
        let records = kb
            .records()
            .iter()
            .map(|r| IndexRecord {
                uid: r.uid,
                identifier: r.identifier,
                name: r.name.clone(),
            })
            .collect::<Vec<_>>();
        let mut by_name: HashMap<String, BTreeSet<EntityId>> = HashMap::new();
        for r in &records {
            by_name.entry(r.name.clone()).or_default().insert(r.identifier);
        }
        Ok(NameIndex {
            records,
            embeddings,
            by_name,
            generation,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn embedding(&self, row: usize) -> &[f64] {
        self.embeddings.row(row)
    }

    /// Entities a name maps to in the indexed KB.
    pub fn entities_of(&self, name: &str) -> BTreeSet<EntityId> {
        self.by_name.get(name).cloned().unwrap_or_default()
    }

    fn candidate(&self, row: usize, score: f64, provenance: Provenance) -> Candidate {
        let r = &self.records[row];
        Candidate {
            row,
            uid: r.uid,
            name: r.name.clone(),
            identifier: r.identifier,
            score,
            provenance,
        }
    }

    fn check_dim(&self, q: &[f64]) -> Result<(), RetrievalError> {
        if !self.is_empty() && q.len() != self.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// The `k` rows with the largest inner product with `q`, best first,
    /// ties broken by lower uid. `k` is clamped to the index size.
    pub fn query_topk(&self, q: &[f64], k: usize) -> Result<Vec<Candidate>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        self.check_dim(q)?;
        let mut scored: Vec<(f64, i64, usize)> = if self.len() >= 2048 {
            (0..self.len())
                .into_par_iter()
                .map(|i| (dot(q, self.embedding(i)), self.records[i].uid, i))
                .collect()
        } else {
            (0..self.len())
                .map(|i| (dot(q, self.embedding(i)), self.records[i].uid, i))
                .collect()
        };
        if let Some(bad) = scored.iter().find(|s| !s.0.is_finite()) {
            return Err(RetrievalError::NonFinite(bad.1));
        }
        let cmp = |a: &(f64, i64, usize), b: &(f64, i64, usize)| rank_order((a.0, a.1), (b.0, b.1));
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(s, _, row)| self.candidate(row, s, Provenance::Kb))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, kb: &Kb) -> Result<Self, RetrievalError> {
        Self::read_from(&mut BufReader::new(File::open(path)?), kb)
    }

    /// Magic, generation, shape, row uids, then the row-major matrix.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), RetrievalError> {
        out.write_all(INDEX_MAGIC)?;
        out.write_u64::<LittleEndian>(self.generation)?;
        out.write_u64::<LittleEndian>(self.embeddings.rows as u64)?;
        out.write_u64::<LittleEndian>(self.embeddings.cols as u64)?;
        for r in &self.records {
            out.write_i64::<LittleEndian>(r.uid)?;
        }
        for v in &self.embeddings.data {
            out.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R, kb: &Kb) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(RetrievalError::Format("not an index file".into()));
        }
        let generation = input.read_u64::<LittleEndian>()?;
        let rows = input.read_u64::<LittleEndian>()? as usize;
        let cols = input.read_u64::<LittleEndian>()? as usize;
        if rows != kb.len() {
            return Err(RetrievalError::ShapeMismatch { rows, records: kb.len() });
        }
        for (i, rec) in kb.records().iter().enumerate() {
            let uid = input.read_i64::<LittleEndian>()?;
            if uid != rec.uid {
                return Err(RetrievalError::KbMismatch(format!(
                    "row {i} has uid {uid}, KB record has {}",
                    rec.uid
                )));
            }
        }
        let mut data = vec![0.0; rows * cols];
        for v in data.iter_mut() {
            *v = input.read_f64::<LittleEndian>()?;
        }
        Self::new(EmbeddingMatrix { rows, cols, data }, kb, generation)
    }
}

/// Candidates for mention `i` taken from the KB halves of the other
/// mentions of the same document, skipping uids already in `kb_pools[i]`,
/// rescored against `m_i` and truncated to `k_half`.
pub fn shared_candidates(
    index: &NameIndex,
    kb_pools: &[Vec<Candidate>],
    i: usize,
    m_i: &[f64],
    k_half: usize,
) -> Vec<Candidate> {
    let mut seen: HashSet<i64> = kb_pools[i].iter().map(|c| c.uid).collect();
    let mut out: Vec<Candidate> = Vec::new();
    for (j, pool) in kb_pools.iter().enumerate() {
        if j == i {
            continue;
        }
        for c in pool {
            if seen.insert(c.uid) {
                out.push(index.candidate(c.row, dot(m_i, index.embedding(c.row)), Provenance::Shared));
            }
        }
    }
    out.sort_by(|a, b| rank_order((a.score, a.uid), (b.score, b.uid)));
    out.truncate(k_half);
    out
}

/// One pool of size `k` per mention: `k/2` nearest names, `k/2` shared
/// candidates, and further nearest names when sharing falls short.
pub fn build_pool(
    index: &NameIndex,
    mentions: &[Embedding],
    k: usize,
) -> Result<Vec<CandidatePool>, RetrievalError> {
    if k % 2 == 1 {
        return Err(RetrievalError::OddPoolSize);
    }
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let half = k / 2;
    let ranked: Vec<Vec<Candidate>> = mentions
        .iter()
        .map(|m| {
            if index.is_empty() {
                Ok(Vec::new())
            } else {
                index.query_topk(&m.0, k)
            }
        })
        .collect::<Result<_, _>>()?;
    let kb_halves: Vec<Vec<Candidate>> = ranked
        .iter()
        .map(|r| r[..half.min(r.len())].to_vec())
        .collect();

    let mut pools = Vec::with_capacity(mentions.len());
    for (i, m) in mentions.iter().enumerate() {
        let shared = shared_candidates(index, &kb_halves, i, &m.0, half);
        let shared_uids: HashSet<i64> = shared.iter().map(|c| c.uid).collect();
        let mut candidates = kb_halves[i].clone();
        let wanted = k - shared.len();
        for c in ranked[i].iter().skip(candidates.len()) {
            if candidates.len() >= wanted {
                break;
            }
            if !shared_uids.contains(&c.uid) {
                candidates.push(c.clone());
            }
        }
        candidates.extend(shared);
        pools.push(CandidatePool { mention: i, candidates });
    }
    Ok(pools)
}

/// Tab-separated candidate dump for debugging.
pub fn write_candidate_dump<W: Write>(
    out: &mut W,
    doc_id: &str,
    pools: &[CandidatePool],
) -> io::Result<()> {
    for pool in pools {
        for (rank, c) in pool.candidates.iter().enumerate() {
            writeln!(
                out,
                "{doc_id}:{}\t{}\t{}\t{}\t{}\t{}",
                pool.mention,
                rank + 1,
                c.uid,
                c.name,
                c.score,
                c.provenance
            )?;
        }
    }
    Ok(())
}
