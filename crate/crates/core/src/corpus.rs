//! Annotated corpora: one JSON document per line.
//!
//! ```text
//! {"id":"d1","text":"Discharge was noted.","sentences":[[0,20]],
//!  "mentions":[{"start":0,"end":9,"gold":[600083]}]}
//! ```
//!
//! Offsets count Unicode scalar values, not bytes. `sentences` is optional;
//! a mention may carry its `surface`, which must then match the text.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::EntityId;
use crate::sentences::{merge_around_spans, split_sentences};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub surface: String,
    pub gold: BTreeSet<EntityId>,
    /// Index of the enclosing sentence, set once sentences are known.
    #[serde(skip)]
    pub sentence: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentences: Option<Vec<(usize, usize)>>,
    pub mentions: Vec<Mention>,
}

/// A mention in its sentence: the sentence text and the span's character
/// offsets relative to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionContext<'a> {
    pub sentence: &'a str,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocIssue {
    pub doc_id: String,
    pub message: String,
}

impl fmt::Display for DocIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "document {}: {}", self.doc_id, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{} invalid document(s); first: {}", .0.len(), .0[0])]
    Validation(Vec<DocIssue>),
}

/// Byte offset of every character boundary (`len + 1` entries).
fn char_boundaries(text: &str) -> Vec<usize> {
    text.char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .collect()
}

impl Document {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Text between two character offsets. Panics when out of bounds.
    pub fn slice(&self, start: usize, end: usize) -> &str {
        let b = char_boundaries(&self.text);
        &self.text[b[start]..b[end]]
    }

    /// Checks offsets, surfaces, gold sets and sentence layout, materialises
    /// surfaces and assigns sentence indices.
    pub fn validate(&mut self) -> Result<(), Vec<String>> {
        let bounds = char_boundaries(&self.text);
        let len = bounds.len() - 1;
        let mut problems = Vec::new();

        if let Some(sents) = &self.sentences {
            let mut prev_end = 0;
            for (i, &(s, e)) in sents.iter().enumerate() {
                if s >= e || e > len {
                    problems.push(format!("sentence {i} has invalid offsets ({s}, {e})"));
                } else if s < prev_end {
                    problems.push(format!("sentence {i} overlaps or is out of order"));
                }
                prev_end = prev_end.max(e);
            }
        }

        for (i, m) in self.mentions.iter_mut().enumerate() {
            if m.start >= m.end || m.end > len {
                problems.push(format!(
                    "mention {i} offsets ({}, {}) out of bounds for text of length {len}",
                    m.start, m.end
                ));
                continue;
            }
            let actual = &self.text[bounds[m.start]..bounds[m.end]];
            if m.surface.is_empty() {
                m.surface = actual.to_string();
            } else if m.surface != actual {
                problems.push(format!(
                    "mention {i} surface {:?} does not match text {actual:?}",
                    m.surface
                ));
            }
            if m.gold.is_empty() {
                problems.push(format!("mention {i} has an empty gold set"));
            }
            m.sentence = None;
            if let Some(sents) = &self.sentences {
                let inside: Vec<usize> = sents
                    .iter()
                    .enumerate()
                    .filter(|(_, &(s, e))| s <= m.start && m.end <= e)
                    .map(|(k, _)| k)
                    .collect();
                match inside.as_slice() {
                    [k] => m.sentence = Some(*k),
                    _ => problems.push(format!("mention {i} is not inside exactly one sentence")),
                }
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Fills in sentence offsets with the rule-based splitter when absent.
    /// Boundaries that would cut through a mention are dropped.
    pub fn ensure_sentences(&mut self) {
        if self.sentences.is_none() {
            let spans: Vec<(usize, usize)> = self.mentions.iter().map(|m| (m.start, m.end)).collect();
            self.sentences = Some(merge_around_spans(split_sentences(&self.text), &spans));
        }
        let sents = self.sentences.as_ref().expect("just set");
        for m in &mut self.mentions {
            m.sentence = sents
                .iter()
                .position(|&(s, e)| s <= m.start && m.end <= e);
        }
    }

    /// Sentence spans, splitting on the fly when none are stored.
    pub fn sentence_spans(&self) -> Vec<(usize, usize)> {
        match &self.sentences {
            Some(s) => s.clone(),
            None => {
                let spans: Vec<(usize, usize)> =
                    self.mentions.iter().map(|m| (m.start, m.end)).collect();
                merge_around_spans(split_sentences(&self.text), &spans)
            }
        }
    }

    /// The sentence around mention `idx`; the whole text when no sentence is
    /// assigned.
    pub fn context(&self, idx: usize) -> MentionContext<'_> {
        let m = &self.mentions[idx];
        let (s, e) = m
            .sentence
            .and_then(|k| self.sentences.as_ref().map(|v| v[k]))
            .unwrap_or((0, self.char_len()));
        MentionContext {
            sentence: self.slice(s, e),
            span: (m.start - s, m.end - s),
        }
    }
}

pub fn parse_corpus(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus_str(&text)
}

pub fn parse_corpus_str(text: &str) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    let mut issues = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut doc: Document =
            serde_json::from_str(line).map_err(|source| CorpusError::Json { line: n + 1, source })?;
        if let Err(problems) = doc.validate() {
            issues.extend(problems.into_iter().map(|message| DocIssue {
                doc_id: doc.id.clone(),
                message,
            }));
        }
        docs.push(doc);
    }
    if issues.is_empty() {
        Ok(docs)
    } else {
        Err(CorpusError::Validation(issues))
    }
}

pub fn corpus_to_string(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("documents serialise"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<(), CorpusError> {
    fs::write(path, corpus_to_string(docs)).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}
