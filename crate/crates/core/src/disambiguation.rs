//! Homonym disambiguation: every homonymous KB name is rewritten into a unique
//! expanded form by appending distinguishing information in parentheses.
//!
//! The rewrite runs in two passes.
//!
//! 1. **Cross-species.** Names shared by entities of different species get the
//!    species name from a taxonomy mapping: `A2M` becomes `A2M (human)` and
//!    `A2M (cattle)`.
//! 2. **Intra-species.** For each remaining homonym instance `s` of entity `e`
//!    with preferred name `p`:
//!    * `s != p`: the disambiguator is `p`;
//!    * `s == p`: the disambiguator is the shortest other name of `e` (ties
//!      broken lexicographically);
//!    * `s == p` and `e` has no other name: `s` stays as it is and acts as the
//!      default meaning. When several entities of one homonym are in this
//!      situation only the one with the lowest identifier is the default, the
//!      others stay residual.
//!
//! Final names follow the grammar `ORIGINAL`, `ORIGINAL (D)`,
//! `ORIGINAL (SPECIES)` or `ORIGINAL (D, SPECIES)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fmt::Write as _;

use thiserror::Error;

use crate::homonyms::{find_all_homonyms, find_cross_species_homonyms, find_homonyms, HomonymSet};
use crate::kb::{EntityId, Kb, KbError, KbRecord, ParseOptions, SpeciesId};

pub type Taxonomy = BTreeMap<SpeciesId, String>;

#[derive(Debug, Error)]
pub enum DisambiguationError {
    #[error("unknown species {0}")]
    UnknownSpecies(SpeciesId),
    #[error("the knowledge base carries a species for every record; a taxonomy is required")]
    TaxonomyRequired,
    #[error(transparent)]
    Kb(#[from] KbError),
}

/// How a record's final name was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    /// Disambiguated with the entity's preferred name.
    Pref,
    /// Preferred-name homonym disambiguated with the shortest other name.
    Shortest,
    /// Only the species component was added.
    Species,
    /// Left unmodified as the default meaning.
    Default,
    /// Still homonymous after rewriting.
    Residual,
}

impl Rule {
    pub fn as_str(&self) -> &'static str {
        match self {
            Rule::Pref => "pref",
            Rule::Shortest => "shortest",
            Rule::Species => "species",
            Rule::Default => "default",
            Rule::Residual => "residual",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decomposition of a final name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameParts {
    pub original: String,
    pub disambiguator: Option<String>,
    pub species: Option<String>,
}

impl NameParts {
    pub fn render(&self) -> String {
        match (&self.disambiguator, &self.species) {
            (None, None) => self.original.clone(),
            (Some(d), None) => format!("{} ({d})", self.original),
            (None, Some(sp)) => format!("{} ({sp})", self.original),
            (Some(d), Some(sp)) => format!("{} ({d}, {sp})", self.original),
        }
    }

    /// Text inside the parentheses, if any.
    pub fn suffix(&self) -> Option<String> {
        match (&self.disambiguator, &self.species) {
            (None, None) => None,
            (Some(d), None) => Some(d.clone()),
            (None, Some(sp)) => Some(sp.clone()),
            (Some(d), Some(sp)) => Some(format!("{d}, {sp}")),
        }
    }

    /// Splits `final_name` back into its components given the original name
    /// and, when one was added, the species component.
    pub fn parse(final_name: &str, original: &str, species: Option<&str>) -> Option<NameParts> {
        if final_name == original && species.is_none() {
            return Some(NameParts {
                original: original.to_string(),
                disambiguator: None,
                species: None,
            });
        }
        let inner = final_name
            .strip_prefix(original)?
            .strip_prefix(" (")?
            .strip_suffix(')')?;
        let (disambiguator, species) = match species {
            Some(sp) if inner == sp => (None, Some(sp.to_string())),
            Some(sp) => {
                let d = inner.strip_suffix(sp)?.strip_suffix(", ")?;
                (Some(d.to_string()), Some(sp.to_string()))
            }
            None => (Some(inner.to_string()), None),
        };
        Some(NameParts {
            original: original.to_string(),
            disambiguator,
            species,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rewrite {
    pub uid: i64,
    pub identifier: EntityId,
    pub parts: NameParts,
    pub final_name: String,
    pub rule: Rule,
}

/// Output of the cross-species pass: the KB with species components applied,
/// plus the original names and species components by uid.
#[derive(Debug, Clone)]
pub struct SpeciesPass {
    pub kb: Kb,
    pub tags: BTreeMap<i64, SpeciesTag>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeciesTag {
    pub original: String,
    pub species: String,
}

#[derive(Debug, Clone)]
pub struct DisambiguatedKb {
    pub kb: Kb,
    /// One entry per record touched by either pass, keyed by uid.
    pub rewrites: BTreeMap<i64, Rewrite>,
    /// Homonyms in the input, counted on original names.
    pub original_homonyms: usize,
    /// Original homonyms for which some derived final name is still a homonym.
    pub unresolved: BTreeSet<String>,
    /// Final names that still label more than one entity.
    pub residual_homonyms: HomonymSet,
    pub success_rate: f64,
}

impl DisambiguatedKb {
    /// Audit rows (`uid, original, final, disambiguator, rule`) with a header,
    /// in KB record order.
    pub fn audit_tsv(&self) -> String {
        let mut s = String::from("uid\toriginal\tfinal\tdisambiguator\trule\n");
        for r in self.kb.records() {
            if let Some(rw) = self.rewrites.get(&r.uid) {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}",
                    rw.uid,
                    rw.parts.original,
                    rw.final_name,
                    rw.parts.suffix().unwrap_or_default(),
                    rw.rule
                );
            }
        }
        s
    }
}

/// Adds the species component to every cross-species homonym instance.
pub fn disambiguate_cross_species(
    kb: &Kb,
    taxonomy: &Taxonomy,
) -> Result<SpeciesPass, DisambiguationError> {
    let cross = find_cross_species_homonyms(kb)?;
    let mut tags = BTreeMap::new();
    let mut records = kb.records().to_vec();
    for r in &mut records {
        if !cross.contains_key(&r.name) {
            continue;
        }
        let sp = r.species.ok_or(KbError::Unsupported { column: "species" })?;
        let species = taxonomy
            .get(&sp)
            .ok_or(DisambiguationError::UnknownSpecies(sp))?;
        let parts = NameParts {
            original: r.name.clone(),
            disambiguator: None,
            species: Some(species.clone()),
        };
        tags.insert(
            r.uid,
            SpeciesTag {
                original: r.name.clone(),
                species: species.clone(),
            },
        );
        r.name = parts.render();
    }
    let kb = Kb::from_records(records, ParseOptions::lenient())?;
    Ok(SpeciesPass { kb, tags })
}

/// Intra-species pass on a KB that has not been through the species pass.
pub fn disambiguate_intra(kb: &Kb, homonyms: &HomonymSet) -> Result<DisambiguatedKb, DisambiguationError> {
    disambiguate_intra_tagged(kb, homonyms, &BTreeMap::new())
}

/// Intra-species pass composing with species components from a previous pass.
pub fn disambiguate_intra_tagged(
    kb: &Kb,
    homonyms: &HomonymSet,
    tags: &BTreeMap<i64, SpeciesTag>,
) -> Result<DisambiguatedKb, DisambiguationError> {
    let original_of = |r: &KbRecord| -> String {
        tags.get(&r.uid)
            .map(|t| t.original.clone())
            .unwrap_or_else(|| r.name.clone())
    };

    let mut rewrites: BTreeMap<i64, Rewrite> = BTreeMap::new();
    let mut records = kb.records().to_vec();
    // current name -> (identifier, uid) of records left unmodified
    let mut unmodified: BTreeMap<String, Vec<(EntityId, i64)>> = BTreeMap::new();

    for r in &mut records {
        let tag = tags.get(&r.uid);
        let original = original_of(r);
        let in_homonym = homonyms
            .get(&r.name)
            .is_some_and(|ids| ids.contains(&r.identifier));

        let mut parts = NameParts {
            original: original.clone(),
            disambiguator: None,
            species: tag.map(|t| t.species.clone()),
        };
        let mut rule = Rule::Species;

        if in_homonym {
            let disambiguator = if r.is_preferred() {
                shortest_other_name(kb, r, &original, &original_of).map(|d| (d, Rule::Shortest))
            } else {
                kb.preferred_record(r.identifier)
                    .map(|p| (original_of(p), Rule::Pref))
            };
            match disambiguator {
                Some((d, applied)) => {
                    parts.disambiguator = Some(d);
                    rule = applied;
                }
                None => {
                    unmodified
                        .entry(r.name.clone())
                        .or_default()
                        .push((r.identifier, r.uid));
                    rule = Rule::Default;
                }
            }
        } else if tag.is_none() {
            continue;
        }

        let final_name = parts.render();
        r.name = final_name.clone();
        rewrites.insert(
            r.uid,
            Rewrite {
                uid: r.uid,
                identifier: r.identifier,
                parts,
                final_name,
                rule,
            },
        );
    }

    // One default meaning per homonym group: lowest identifier wins.
    for group in unmodified.values_mut() {
        group.sort_unstable();
        for &(_, uid) in group.iter().skip(1) {
            if let Some(rw) = rewrites.get_mut(&uid) {
                rw.rule = Rule::Residual;
            }
        }
    }

    let original_homonyms = homonyms_by_original(kb, &original_of);
    let new_kb = Kb::from_records(records, ParseOptions::lenient())?;
    Ok(finish(new_kb, rewrites, &original_homonyms, tags))
}

/// Shortest name of `record`'s entity other than `original`, compared on
/// original (pre-species) names.
fn shortest_other_name(
    kb: &Kb,
    record: &KbRecord,
    original: &str,
    original_of: &dyn Fn(&KbRecord) -> String,
) -> Option<String> {
    kb.records_of(record.identifier)
        .filter(|o| o.uid != record.uid)
        .map(original_of)
        .filter(|name| name != original)
        .min_by(|a, b| {
            a.chars()
                .count()
                .cmp(&b.chars().count())
                .then_with(|| a.cmp(b))
        })
}

fn homonyms_by_original(
    kb: &Kb,
    original_of: &dyn Fn(&KbRecord) -> String,
) -> BTreeSet<String> {
    let mut by_name: HashMap<String, BTreeSet<EntityId>> = HashMap::new();
    for r in kb.records() {
        by_name.entry(original_of(r)).or_default().insert(r.identifier);
    }
    by_name
        .into_iter()
        .filter(|(_, ids)| ids.len() > 1)
        .map(|(name, _)| name)
        .collect()
}

fn finish(
    kb: Kb,
    mut rewrites: BTreeMap<i64, Rewrite>,
    original_homonyms: &BTreeSet<String>,
    tags: &BTreeMap<i64, SpeciesTag>,
) -> DisambiguatedKb {
    let residual = find_all_homonyms(&kb);
    let mut unresolved = BTreeSet::new();
    for r in kb.records() {
        if !residual.contains_key(&r.name) {
            continue;
        }
        let original = match rewrites.get_mut(&r.uid) {
            Some(rw) => {
                if rw.rule != Rule::Default {
                    rw.rule = Rule::Residual;
                }
                rw.parts.original.clone()
            }
            None => tags
                .get(&r.uid)
                .map(|t| t.original.clone())
                .unwrap_or_else(|| r.name.clone()),
        };
        if original_homonyms.contains(&original) {
            unresolved.insert(original);
        }
    }
    let success_rate = if original_homonyms.is_empty() {
        1.0
    } else {
        (original_homonyms.len() - unresolved.len()) as f64 / original_homonyms.len() as f64
    };
    DisambiguatedKb {
        kb,
        rewrites,
        original_homonyms: original_homonyms.len(),
        unresolved,
        residual_homonyms: residual,
        success_rate,
    }
}

/// Full procedure: cross-species pass when the KB carries species, then the
/// intra-species pass on the recomputed homonym set.
pub fn disambiguate(kb: &Kb, taxonomy: Option<&Taxonomy>) -> Result<DisambiguatedKb, DisambiguationError> {
    match taxonomy {
        Some(tax) => {
            let pass = disambiguate_cross_species(kb, tax)?;
            let homonyms = find_homonyms(&pass.kb);
            disambiguate_intra_tagged(&pass.kb, &homonyms, &pass.tags)
        }
        None => {
            if kb.has_species() {
                return Err(DisambiguationError::TaxonomyRequired);
            }
            let homonyms = find_homonyms(kb);
            disambiguate_intra(kb, &homonyms)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::KbRecord;

    fn kb(rows: &[(i64, i64, u32, &str, Option<i64>)]) -> Kb {
        let records = rows
            .iter()
            .map(|&(uid, id, d, name, sp)| KbRecord::new(uid, id, d, name, sp))
            .collect();
        Kb::from_records(records, ParseOptions::default()).unwrap()
    }

    fn names_of(kb: &Kb, id: i64) -> Vec<String> {
        kb.records_of(EntityId(id)).map(|r| r.name.clone()).collect()
    }

    fn discharge_kb() -> Kb {
        kb(&[
            (1, 30685, 0, "Patient Discharge", None),
            (2, 30685, 1, "Discharge", None),
            (3, 600083, 0, "Body Fluid Discharge", None),
            (4, 600083, 1, "Discharge", None),
        ])
    }

    fn taxonomy() -> Taxonomy {
        Taxonomy::from([
            (SpeciesId(9606), "human".to_string()),
            (SpeciesId(9913), "cattle".to_string()),
        ])
    }

    fn a2m_kb() -> Kb {
        kb(&[
            (1, 2, 0, "A2M", Some(9606)),
            (2, 2, 1, "α2microglobulin", Some(9606)),
            (3, 2, 1, "alpha-2-macroglobulin", Some(9606)),
            (4, 280705, 0, "A2M", Some(9913)),
            (5, 280705, 1, "alpha-2-macroglobulin precursor", Some(9913)),
            (6, 3494, 0, "IGHA2", Some(9606)),
            (7, 3494, 1, "A2M", Some(9606)),
        ])
    }

    #[test]
    fn non_preferred_homonym_gets_preferred_name() {
        let out = disambiguate(&discharge_kb(), None).unwrap();
        assert_eq!(names_of(&out.kb, 30685)[1], "Discharge (Patient Discharge)");
        assert_eq!(names_of(&out.kb, 600083)[1], "Discharge (Body Fluid Discharge)");
        assert_eq!(out.success_rate, 1.0);
        assert!(out.residual_homonyms.is_empty());
        assert_eq!(out.rewrites[&2].rule, Rule::Pref);
        assert_eq!(out.rewrites.len(), 2);
    }

    #[test]
    fn species_pass_alone() {
        let kb = kb(&[(1, 2, 0, "A2M", Some(9606)), (2, 280705, 0, "A2M", Some(9913)), (3, 7, 0, "Solo", Some(9606))]);
        let pass = disambiguate_cross_species(&kb, &taxonomy()).unwrap();
        assert_eq!(pass.kb.records()[0].name, "A2M (human)");
        assert_eq!(pass.kb.records()[1].name, "A2M (cattle)");
        assert_eq!(pass.kb.records()[2].name, "Solo");
        assert_eq!(pass.tags[&1].original, "A2M");
    }

    #[test]
    fn species_pass_unknown_species() {
        let kb = kb(&[(1, 2, 0, "A2M", Some(9606)), (2, 280705, 0, "A2M", Some(10090))]);
        let tax = Taxonomy::from([(SpeciesId(10090), "mouse".to_string())]);
        let err = disambiguate_cross_species(&kb, &tax).unwrap_err();
        assert_eq!(err.to_string(), "unknown species 9606");
    }

    #[test]
    fn species_pass_requires_species() {
        let err = disambiguate_cross_species(&discharge_kb(), &taxonomy()).unwrap_err();
        assert!(matches!(err, DisambiguationError::Kb(KbError::Unsupported { .. })));
        let err = disambiguate(&a2m_kb(), None).unwrap_err();
        assert!(matches!(err, DisambiguationError::TaxonomyRequired));
    }

    #[test]
    fn cross_and_intra_species_compose() {
        let out = disambiguate(&a2m_kb(), Some(&taxonomy())).unwrap();
        let finals: Vec<&str> = out.kb.records().iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            finals,
            [
                "A2M (α2microglobulin, human)",
                "α2microglobulin",
                "alpha-2-macroglobulin",
                "A2M (cattle)",
                "alpha-2-macroglobulin precursor",
                "IGHA2",
                "A2M (IGHA2, human)",
            ]
        );
        assert_eq!(out.success_rate, 1.0);
        assert_eq!(out.rewrites[&1].rule, Rule::Shortest);
        assert_eq!(out.rewrites[&4].rule, Rule::Species);
        assert_eq!(out.rewrites[&7].rule, Rule::Pref);
        let audit = out.audit_tsv();
        assert!(audit.contains("1\tA2M\tA2M (α2microglobulin, human)\tα2microglobulin, human\tshortest\n"));
        assert!(audit.contains("4\tA2M\tA2M (cattle)\tcattle\tspecies\n"));
    }

    #[test]
    fn swapped_preferred_names_leave_residual() {
        let kb = kb(&[
            (1, 20316, 0, "Hydroxocobalamin", None),
            (2, 20316, 1, "Aquacobalamin", None),
            (3, 3663, 0, "Aquacobalamin", None),
            (4, 3663, 1, "Hydroxocobalamin", None),
        ]);
        let out = disambiguate(&kb, None).unwrap();
        assert_eq!(out.kb.records()[0].name, "Hydroxocobalamin (Aquacobalamin)");
        assert_eq!(out.kb.records()[3].name, "Hydroxocobalamin (Aquacobalamin)");
        assert!(out.residual_homonyms.contains_key("Hydroxocobalamin (Aquacobalamin)"));
        assert!(out.unresolved.contains("Hydroxocobalamin"));
        assert_eq!(out.original_homonyms, 2);
        assert_eq!(out.success_rate, 0.0);
        assert!(out.rewrites.values().all(|r| r.rule == Rule::Residual));
    }

    #[test]
    fn partial_success_rate() {
        // 4 homonyms: Hydroxocobalamin (unresolved), Aquacobalamin, Discharge, Cold
        let kb = kb(&[
            (1, 20316, 0, "Hydroxocobalamin", None),
            (2, 20316, 1, "Aquacobalamin", None),
            (3, 3663, 0, "Aquacobalamin", None),
            (4, 3663, 1, "Hydroxocobalamin", None),
            (5, 3663, 1, "B12a", None),
            (6, 30685, 0, "Patient Discharge", None),
            (7, 30685, 1, "Discharge", None),
            (8, 600083, 0, "Body Fluid Discharge", None),
            (9, 600083, 1, "Discharge", None),
            (10, 9442, 0, "Common Cold", None),
            (11, 9442, 1, "Cold", None),
            (12, 9443, 0, "Cold Temperature", None),
            (13, 9443, 1, "Cold", None),
        ]);
        let out = disambiguate(&kb, None).unwrap();
        assert_eq!(out.original_homonyms, 4);
        assert_eq!(out.unresolved, BTreeSet::from(["Hydroxocobalamin".to_string()]));
        assert!((out.success_rate - 0.75).abs() < 1e-12);
        assert_eq!(out.kb.records()[2].name, "Aquacobalamin (B12a)");
    }

    #[test]
    fn default_meaning_keeps_one_unmodified() {
        // "TS" is preferred for three entities; two have no other names.
        let kb = kb(&[
            (1, 10, 0, "TS", None),
            (2, 11, 0, "TS", None),
            (3, 11, 1, "Tourette Syndrome", None),
            (4, 12, 0, "TS", None),
        ]);
        let out = disambiguate(&kb, None).unwrap();
        let finals: Vec<&str> = out.kb.records().iter().map(|r| r.name.as_str()).collect();
        assert_eq!(finals, ["TS", "TS (Tourette Syndrome)", "Tourette Syndrome", "TS"]);
        assert_eq!(out.rewrites[&1].rule, Rule::Default);
        assert_eq!(out.rewrites[&4].rule, Rule::Residual);
        assert!(out.residual_homonyms.contains_key("TS"));

        // with a single alternative-less entity, n-1 records are rewritten
        let kb2 = Kb::from_records(
            kb.records().iter().filter(|r| r.uid != 4).cloned().collect(),
            ParseOptions::default(),
        )
        .unwrap();
        let out = disambiguate(&kb2, None).unwrap();
        assert_eq!(out.success_rate, 1.0);
        let changed = out
            .kb
            .records()
            .iter()
            .zip(kb2.records())
            .filter(|(a, b)| a.name != b.name)
            .count();
        assert_eq!(changed, 1);
        assert_eq!(out.rewrites[&1].rule, Rule::Default);
    }

    #[test]
    fn shortest_ties_break_lexicographically() {
        let kb = kb(&[
            (1, 1, 0, "X", None),
            (2, 1, 1, "bb", None),
            (3, 1, 1, "ab", None),
            (4, 1, 1, "abc", None),
            (5, 2, 0, "Y", None),
            (6, 2, 1, "X", None),
        ]);
        let out = disambiguate(&kb, None).unwrap();
        assert_eq!(out.kb.records()[0].name, "X (ab)");
        assert_eq!(out.kb.records()[5].name, "X (Y)");
    }

    #[test]
    fn homonym_free_kb_is_identity() {
        let kb = kb(&[(1, 1, 0, "a", None), (2, 2, 0, "b", None)]);
        let out = disambiguate(&kb, None).unwrap();
        assert_eq!(out.kb, kb);
        assert_eq!(out.success_rate, 1.0);
        assert!(out.rewrites.is_empty());
    }

    #[test]
    fn names_with_parentheses_are_wrapped_verbatim() {
        let kb = kb(&[
            (1, 1, 0, "Factor (X)", None),
            (2, 1, 1, "F", None),
            (3, 2, 0, "Fluorine", None),
            (4, 2, 1, "F", None),
        ]);
        let out = disambiguate(&kb, None).unwrap();
        assert_eq!(out.kb.records()[1].name, "F (Factor (X))");
        let parts = NameParts::parse("F (Factor (X))", "F", None).unwrap();
        assert_eq!(parts.disambiguator.as_deref(), Some("Factor (X)"));
    }

    #[test]
    fn name_grammar_round_trip() {
        for parts in [
            NameParts { original: "A2M".into(), disambiguator: Some("IGHA2".into()), species: Some("human".into()) },
            NameParts { original: "A2M".into(), disambiguator: None, species: Some("human".into()) },
            NameParts { original: "a, b".into(), disambiguator: Some("c, d".into()), species: None },
            NameParts { original: "plain".into(), disambiguator: None, species: None },
        ] {
            let rendered = parts.render();
            let back = NameParts::parse(&rendered, &parts.original, parts.species.as_deref()).unwrap();
            assert_eq!(back, parts);
        }
    }
}
