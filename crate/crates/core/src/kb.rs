//! Knowledge-base records, parsing and the name/entity indices.
//!
//! A KB file is UTF-8, tab-separated, one record per line with the columns
//! `uid`, `identifier`, `description`, `name`, `species` (species may be
//! empty). There is no header row.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Entity label as stored in the `identifier` column.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct EntityId(pub i64);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Taxonomy entity attached to a record (the `species` column).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SpeciesId(pub i64);

impl fmt::Display for SpeciesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Description code of the preferred name. Every other code is "not preferred".
pub const PREFERRED: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbRecord {
    pub uid: i64,
    pub identifier: EntityId,
    /// `0` marks the preferred name; other codes (abbreviation, synonym, ...)
    /// are kept verbatim but only distinguished as "other".
    pub description: u32,
    pub name: String,
    pub species: Option<SpeciesId>,
}

impl KbRecord {
    pub fn new(
        uid: i64,
        identifier: i64,
        description: u32,
        name: impl Into<String>,
        species: Option<i64>,
    ) -> Self {
        KbRecord {
            uid,
            identifier: EntityId(identifier),
            description,
            name: name.into(),
            species: species.map(SpeciesId),
        }
    }

    pub fn is_preferred(&self) -> bool {
        self.description == PREFERRED
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Validation {
    /// Preferred-name violations abort construction.
    #[default]
    Strict,
    /// Violations are logged and recorded in [`Kb::validation`].
    Lenient,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    pub validation: Validation,
}

impl ParseOptions {
    pub fn lenient() -> Self {
        ParseOptions {
            validation: Validation::Lenient,
        }
    }
}

/// Entities that break the "exactly one preferred name" rule.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub missing_preferred: Vec<EntityId>,
    pub multiple_preferred: Vec<EntityId>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.missing_preferred.is_empty() && self.multiple_preferred.is_empty()
    }

    pub fn is_violating(&self, id: EntityId) -> bool {
        self.missing_preferred.binary_search(&id).is_ok()
            || self.multiple_preferred.binary_search(&id).is_ok()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} entities without a preferred name, {} with several",
            self.missing_preferred.len(),
            self.multiple_preferred.len()
        )?;
        if let Some(id) = self.missing_preferred.first() {
            write!(f, " (e.g. missing: {id})")?;
        }
        if let Some(id) = self.multiple_preferred.first() {
            write!(f, " (e.g. multiple: {id})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("preferred-name validation failed: {0}")]
    Validation(ValidationReport),
    #[error("unknown entity {0}")]
    NotFound(EntityId),
    #[error("entity {0} does not have exactly one preferred name")]
    InvariantViolation(EntityId),
    #[error("operation requires the {column} column to be populated for every record")]
    Unsupported { column: &'static str },
}

/// Immutable, indexed knowledge base.
#[derive(Debug, Clone, PartialEq)]
pub struct Kb {
    records: Vec<KbRecord>,
    by_name: HashMap<String, BTreeSet<(EntityId, Option<SpeciesId>)>>,
    by_entity: HashMap<EntityId, Vec<usize>>,
    validation: ValidationReport,
}

impl Default for Kb {
    fn default() -> Self {
        Kb {
            records: Vec::new(),
            by_name: HashMap::new(),
            by_entity: HashMap::new(),
            validation: ValidationReport::default(),
        }
    }
}

impl Kb {
    /// Builds the indices over `records` as given (no duplicate collapsing).
    pub fn from_records(records: Vec<KbRecord>, options: ParseOptions) -> Result<Kb, KbError> {
        let mut seen_uids = HashSet::with_capacity(records.len());
        let mut by_name: HashMap<String, BTreeSet<(EntityId, Option<SpeciesId>)>> =
            HashMap::new();
        let mut by_entity: HashMap<EntityId, Vec<usize>> = HashMap::new();
        for (row, r) in records.iter().enumerate() {
            if !seen_uids.insert(r.uid) {
                return Err(KbError::Parse {
                    line: row + 1,
                    message: format!("duplicate uid {}", r.uid),
                });
            }
            if r.name.trim().is_empty() {
                return Err(KbError::Parse {
                    line: row + 1,
                    message: "empty name".into(),
                });
            }
            by_name
                .entry(r.name.clone())
                .or_default()
                .insert((r.identifier, r.species));
            by_entity.entry(r.identifier).or_default().push(row);
        }

        let mut validation = ValidationReport::default();
        for (id, rows) in &by_entity {
            match rows.iter().filter(|&&i| records[i].is_preferred()).count() {
                1 => {}
                0 => validation.missing_preferred.push(*id),
                _ => validation.multiple_preferred.push(*id),
            }
        }
        validation.missing_preferred.sort_unstable();
        validation.multiple_preferred.sort_unstable();

        if !validation.is_clean() {
            match options.validation {
                Validation::Strict => return Err(KbError::Validation(validation)),
                Validation::Lenient => log::warn!("knowledge base: {validation}"),
            }
        }

        Ok(Kb {
            records,
            by_name,
            by_entity,
            validation,
        })
    }

    pub fn records(&self) -> &[KbRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validation(&self) -> &ValidationReport {
        &self.validation
    }

    /// `V_KB(name)`: the entities a stored name labels.
    pub fn entities_of(&self, name: &str) -> BTreeSet<EntityId> {
        self.by_name
            .get(name)
            .map(|pairs| pairs.iter().map(|(id, _)| *id).collect())
            .unwrap_or_default()
    }

    /// The raw `(identifier, species)` pairs stored for a name.
    pub fn labels_of(&self, name: &str) -> Option<&BTreeSet<(EntityId, Option<SpeciesId>)>> {
        self.by_name.get(name)
    }

    pub fn contains_entity(&self, id: EntityId) -> bool {
        self.by_entity.contains_key(&id)
    }

    /// Records of one entity, in file order.
    pub fn records_of(&self, id: EntityId) -> impl Iterator<Item = &KbRecord> + '_ {
        self.by_entity
            .get(&id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.records[i])
    }

    /// Entity identifiers in ascending order.
    pub fn entities(&self) -> Vec<EntityId> {
        let mut ids: Vec<_> = self.by_entity.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn entity_count(&self) -> usize {
        self.by_entity.len()
    }

    /// Distinct stored names, sorted.
    pub fn names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.by_name.keys().map(String::as_str).collect();
        names.sort_unstable();
        names
    }

    pub fn distinct_name_count(&self) -> usize {
        self.by_name.len()
    }

    /// True when every record carries a species and the KB is non-empty.
    pub fn has_species(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.species.is_some())
    }

    pub fn preferred_name(&self, id: EntityId) -> Result<&str, KbError> {
        let rows = self.by_entity.get(&id).ok_or(KbError::NotFound(id))?;
        if self.validation.is_violating(id) {
            return Err(KbError::InvariantViolation(id));
        }
        rows.iter()
            .map(|&i| &self.records[i])
            .find(|r| r.is_preferred())
            .map(|r| r.name.as_str())
            .ok_or(KbError::InvariantViolation(id))
    }

    /// The record whose name is the entity's preferred one. With several
    /// preferred rows (lenient KBs) the first in file order wins.
    pub fn preferred_record(&self, id: EntityId) -> Option<&KbRecord> {
        self.records_of(id).find(|r| r.is_preferred())
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            write!(out, "{}\t{}\t{}\t{}\t", r.uid, r.identifier, r.description, r.name)?;
            if let Some(sp) = r.species {
                write!(out, "{sp}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_tsv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("names are UTF-8")
    }

    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        fs::write(path, self.to_tsv_string()).map_err(|source| KbError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Parses a KB file. Duplicate `(identifier, name)` rows are collapsed into
/// one record keeping the lowest uid.
pub fn parse_kb(path: &Path, options: ParseOptions) -> Result<Kb, KbError> {
    let text = fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_kb_str(&text, options)
}

pub fn parse_kb_str(text: &str, options: ParseOptions) -> Result<Kb, KbError> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        rows.push(parse_row(line, n + 1)?);
    }
    Kb::from_records(collapse_duplicates(rows), options)
}

fn parse_row(line: &str, line_no: usize) -> Result<KbRecord, KbError> {
    let err = |message: String| KbError::Parse {
        line: line_no,
        message,
    };
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 5 {
        return Err(err(format!("expected 5 tab-separated columns, found {}", cols.len())));
    }
    let int = |idx: usize, what: &str| -> Result<i64, KbError> {
        cols[idx]
            .trim()
            .parse::<i64>()
            .map_err(|_| err(format!("{what} is not an integer: {:?}", cols[idx])))
    };
    let uid = int(0, "uid")?;
    let identifier = int(1, "identifier")?;
    let description = cols[2]
        .trim()
        .parse::<u32>()
        .map_err(|_| err(format!("description is not a non-negative integer: {:?}", cols[2])))?;
    let name = cols[3];
    if name.trim().is_empty() {
        return Err(err("empty name".into()));
    }
    let species = if cols[4].trim().is_empty() {
        None
    } else {
        Some(int(4, "species")?)
    };
    Ok(KbRecord::new(uid, identifier, description, name, species))
}

/// Collapses rows sharing `(identifier, name)`: the surviving record takes the
/// position of the first occurrence, the lowest uid, and the lowest description
/// code so a preferred flag is never lost.
fn collapse_duplicates(rows: Vec<KbRecord>) -> Vec<KbRecord> {
    let mut first: HashMap<(EntityId, String), usize> = HashMap::new();
    let mut out: Vec<KbRecord> = Vec::with_capacity(rows.len());
    for r in rows {
        match first.get(&(r.identifier, r.name.clone())) {
            Some(&i) => {
                let kept = &mut out[i];
                if r.uid < kept.uid {
                    kept.uid = r.uid;
                    kept.species = r.species;
                }
                kept.description = kept.description.min(r.description);
            }
            None => {
                first.insert((r.identifier, r.name.clone()), out.len());
                out.push(r);
            }
        }
    }
    out
}

/// Reads a two-column `species id <TAB> species name` file.
pub fn parse_taxonomy(path: &Path) -> Result<BTreeMap<SpeciesId, String>, KbError> {
    let text = fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_taxonomy_str(&text)
}

pub fn parse_taxonomy_str(text: &str) -> Result<BTreeMap<SpeciesId, String>, KbError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, name) = line.split_once('\t').ok_or_else(|| KbError::Parse {
            line: n + 1,
            message: "expected `species id<TAB>species name`".into(),
        })?;
        let id = id.trim().parse::<i64>().map_err(|_| KbError::Parse {
            line: n + 1,
            message: format!("species id is not an integer: {id:?}"),
        })?;
        if name.trim().is_empty() {
            return Err(KbError::Parse {
                line: n + 1,
                message: "empty species name".into(),
            });
        }
        out.insert(SpeciesId(id), name.to_string());
    }
    Ok(out)
}
