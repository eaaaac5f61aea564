//! Approximate string matching and the homonym-affected mention estimate.
//!
//! Strings are normalised by lowercasing and dropping every character that
//! is not a Unicode letter or digit. Similarity is `1 - D / (|a| + |b|)`,
//! where `D` is the Levenshtein distance with unit insertion and deletion
//! costs and a substitution cost of 2 (no transpositions).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::Document;
use crate::homonyms::HomonymSet;
use crate::kb::{EntityId, Kb};

pub fn normalize(s: &str) -> String {
    s.chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric())
        .collect()
}

/// Weighted edit distance between two character sequences.
pub fn weighted_levenshtein(a: &[char], b: &[char]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + if ca == cb { 0 } else { 2 };
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalised similarity in `[0, 1]`; 1 exactly when the normalised strings
/// are equal. Two empty strings score 1.
pub fn similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = normalize(a).chars().collect();
    let b: Vec<char> = normalize(b).chars().collect();
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    1.0 - weighted_levenshtein(&a, &b) as f64 / total as f64
}

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("{} mention(s) reference entities missing from the KB: {}", .0.len(), .0.join(", "))]
    UnknownGold(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffectedRow {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub gold: BTreeSet<EntityId>,
    pub matched_homonym: Option<String>,
}

impl AffectedRow {
    pub fn affected(&self) -> bool {
        self.matched_homonym.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffectedReport {
    pub rows: Vec<AffectedRow>,
    pub affected: usize,
}

impl AffectedReport {
    pub fn total(&self) -> usize {
        self.rows.len()
    }

    pub fn fraction(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.affected as f64 / self.rows.len() as f64
        }
    }

    /// Flags in corpus mention order.
    pub fn flags(&self) -> Vec<bool> {
        self.rows.iter().map(AffectedRow::affected).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("doc_id\tstart\tend\tgold\tmatched_homonym\taffected\n");
        for r in &self.rows {
            let gold: Vec<String> = r.gold.iter().map(|g| g.to_string()).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.doc_id,
                r.start,
                r.end,
                gold.join(";"),
                r.matched_homonym.as_deref().unwrap_or(""),
                r.affected()
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "affected: {}\ntotal: {}\naffected_ratio: {}/{}\naffected_fraction: {}\naffected_percent: {:.2}%\n",
            self.affected,
            self.total(),
            self.affected,
            self.total(),
            self.fraction(),
            100.0 * self.fraction()
        )
    }
}

/// A mention is affected when one of its gold entities has a name that is a
/// homonym and matches the mention with similarity 1.
pub fn estimate_affected(
    corpus: &[Document],
    kb: &Kb,
    homonyms: &HomonymSet,
) -> Result<AffectedReport, EstimateError> {
    let mut missing = Vec::new();
    for doc in corpus {
        for m in &doc.mentions {
            for g in &m.gold {
                if !kb.contains_entity(*g) {
                    missing.push(format!("{}:{}-{} (entity {g})", doc.id, m.start, m.end));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(EstimateError::UnknownGold(missing));
    }

    let mut rows = Vec::new();
    for doc in corpus {
        for m in &doc.mentions {
            let matched = m.gold.iter().find_map(|g| {
                kb.records_of(*g)
                    .filter(|r| homonyms.contains_key(&r.name))
                    .find(|r| similarity(&m.surface, &r.name) == 1.0)
                    .map(|r| r.name.clone())
            });
            rows.push(AffectedRow {
                doc_id: doc.id.clone(),
                start: m.start,
                end: m.end,
                gold: m.gold.clone(),
                matched_homonym: matched,
            });
        }
    }
    let affected = rows.iter().filter(|r| r.affected()).count();
    Ok(AffectedReport { rows, affected })
}
