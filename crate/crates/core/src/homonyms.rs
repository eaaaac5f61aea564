//! Homonym detection: names that label more than one entity.
//!
//! Three views are offered. [`find_all_homonyms`] applies the plain
//! definition `|V_KB(s)| > 1`. [`find_homonyms`] groups by `(name, species)`
//! and so only reports intra-species homonyms; records without a species form
//! their own group. [`find_cross_species_homonyms`] reports names whose
//! entities span at least two species.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use crate::kb::{EntityId, Kb, KbError, SpeciesId};

pub type HomonymSet = BTreeMap<String, BTreeSet<EntityId>>;

/// Every stored name with more than one associated entity.
pub fn find_all_homonyms(kb: &Kb) -> HomonymSet {
    kb.names()
        .into_iter()
        .filter_map(|name| {
            let ids = kb.entities_of(name);
            (ids.len() > 1).then(|| (name.to_string(), ids))
        })
        .collect()
}

/// Intra-species homonyms: names with more than one entity inside one
/// `(name, species)` group. The entity set is the union over such groups.
pub fn find_homonyms(kb: &Kb) -> HomonymSet {
    let mut out = HomonymSet::new();
    for name in kb.names() {
        let Some(labels) = kb.labels_of(name) else { continue };
        let mut groups: BTreeMap<Option<SpeciesId>, BTreeSet<EntityId>> = BTreeMap::new();
        for (id, sp) in labels {
            groups.entry(*sp).or_default().insert(*id);
        }
        let ids: BTreeSet<EntityId> = groups
            .into_values()
            .filter(|g| g.len() > 1)
            .flatten()
            .collect();
        if !ids.is_empty() {
            out.insert(name.to_string(), ids);
        }
    }
    out
}

/// Names labelling more than one entity across at least two species.
pub fn find_cross_species_homonyms(kb: &Kb) -> Result<HomonymSet, KbError> {
    if kb.records().iter().any(|r| r.species.is_none()) {
        return Err(KbError::Unsupported { column: "species" });
    }
    let mut out = HomonymSet::new();
    for name in kb.names() {
        let Some(labels) = kb.labels_of(name) else { continue };
        let ids: BTreeSet<EntityId> = labels.iter().map(|(id, _)| *id).collect();
        let species: BTreeSet<SpeciesId> = labels.iter().filter_map(|(_, sp)| *sp).collect();
        if ids.len() > 1 && species.len() > 1 {
            out.insert(name.to_string(), ids);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HomonymDetail {
    pub entities: BTreeSet<EntityId>,
    /// The name is the preferred name of at least one entity it labels.
    pub preferred: bool,
    pub intra_species: bool,
    pub cross_species: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomonymReport {
    /// Number of KB records (name entries).
    pub total_names: usize,
    pub distinct_names: usize,
    /// Distinct names with `|V_KB(s)| > 1`.
    pub homonyms: usize,
    pub preferred_name_homonyms: usize,
    pub other_homonyms: usize,
    pub intra_species_homonyms: usize,
    /// `None` when the KB does not carry a species for every record.
    pub cross_species_homonyms: Option<usize>,
    pub details: BTreeMap<String, HomonymDetail>,
}

impl HomonymReport {
    pub fn fraction(&self) -> f64 {
        if self.total_names == 0 {
            0.0
        } else {
            self.homonyms as f64 / self.total_names as f64
        }
    }

    /// `key: value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "total_names: {}", self.total_names);
        let _ = writeln!(s, "distinct_names: {}", self.distinct_names);
        let _ = writeln!(s, "homonyms: {}", self.homonyms);
        let _ = writeln!(s, "homonyms_ratio: {}/{}", self.homonyms, self.total_names);
        let _ = writeln!(s, "homonyms_fraction: {}", self.fraction());
        let _ = writeln!(s, "preferred_name_homonyms: {}", self.preferred_name_homonyms);
        let _ = writeln!(s, "other_homonyms: {}", self.other_homonyms);
        let _ = writeln!(s, "intra_species_homonyms: {}", self.intra_species_homonyms);
        match self.cross_species_homonyms {
            Some(n) => {
                let _ = writeln!(s, "cross_species_homonyms: {n}");
            }
            None => {
                let _ = writeln!(s, "cross_species_homonyms: n/a");
            }
        }
        s
    }

    /// One row per homonym, with a header.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("name\tentity_count\tentities\tpreferred\tintra_species\tcross_species\n");
        for (name, d) in &self.details {
            let ids: Vec<String> = d.entities.iter().map(|e| e.to_string()).collect();
            let _ = writeln!(
                s,
                "{name}\t{}\t{}\t{}\t{}\t{}",
                d.entities.len(),
                ids.join(";"),
                d.preferred,
                d.intra_species,
                d.cross_species
            );
        }
        s
    }
}

pub fn homonym_report(kb: &Kb) -> HomonymReport {
    let all = find_all_homonyms(kb);
    let intra = find_homonyms(kb);
    let cross = find_cross_species_homonyms(kb).ok();

    let preferred_names: HashSet<&str> = kb
        .records()
        .iter()
        .filter(|r| r.is_preferred())
        .map(|r| r.name.as_str())
        .collect();

    let mut details = BTreeMap::new();
    let mut preferred_count = 0;
    for (name, ids) in &all {
        let preferred = preferred_names.contains(name.as_str());
        if preferred {
            preferred_count += 1;
        }
        details.insert(
            name.clone(),
            HomonymDetail {
                entities: ids.clone(),
                preferred,
                intra_species: intra.contains_key(name),
                cross_species: cross.as_ref().is_some_and(|c| c.contains_key(name)),
            },
        );
    }

    HomonymReport {
        total_names: kb.len(),
        distinct_names: kb.distinct_name_count(),
        homonyms: all.len(),
        preferred_name_homonyms: preferred_count,
        other_homonyms: all.len() - preferred_count,
        intra_species_homonyms: intra.len(),
        cross_species_homonyms: cross.map(|c| c.len()),
        details,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{KbRecord, ParseOptions};
    use proptest::prelude::*;

    fn kb(rows: &[(i64, i64, u32, &str, Option<i64>)]) -> Kb {
        let records = rows
            .iter()
            .map(|&(uid, id, d, name, sp)| KbRecord::new(uid, id, d, name, sp))
            .collect();
        Kb::from_records(records, ParseOptions::default()).unwrap()
    }

    fn ids(xs: &[i64]) -> BTreeSet<EntityId> {
        xs.iter().map(|&x| EntityId(x)).collect()
    }

    #[test]
    fn bri3_is_an_intra_species_homonym() {
        let kb = kb(&[
            (1, 81618, 0, "BRI3", Some(9606)),
            (2, 25798, 0, "BRI3", Some(9606)),
        ]);
        let h = find_homonyms(&kb);
        assert_eq!(h.len(), 1);
        assert_eq!(h["BRI3"], ids(&[81618, 25798]));
        assert!(find_cross_species_homonyms(&kb).unwrap().is_empty());
    }

    #[test]
    fn a2m_is_only_cross_species() {
        let kb = kb(&[(1, 2, 0, "A2M", Some(9606)), (2, 280705, 0, "A2M", Some(9913))]);
        assert!(find_homonyms(&kb).is_empty());
        let x = find_cross_species_homonyms(&kb).unwrap();
        assert_eq!(x["A2M"], ids(&[2, 280705]));
    }

    #[test]
    fn unique_names_have_no_homonyms() {
        let kb = kb(&[(1, 1, 0, "a", None), (2, 2, 0, "b", None), (3, 2, 1, "c", None)]);
        assert!(find_homonyms(&kb).is_empty());
        assert!(find_all_homonyms(&kb).is_empty());
    }

    #[test]
    fn cross_species_requires_species_column() {
        let kb = kb(&[(1, 1, 0, "a", None), (2, 2, 0, "a", Some(9606))]);
        assert!(matches!(
            find_cross_species_homonyms(&kb),
            Err(KbError::Unsupported { column: "species" })
        ));
        // records without species form their own bucket
        assert!(find_homonyms(&kb).is_empty());
    }

    #[test]
    fn report_counts_and_fraction() {
        // 10 names, 2 distinct homonyms
        let kb = kb(&[
            (1, 1, 0, "one", None),
            (2, 1, 1, "x", None),
            (3, 2, 0, "two", None),
            (4, 2, 1, "x", None),
            (5, 3, 0, "three", None),
            (6, 3, 1, "y", None),
            (7, 4, 0, "four", None),
            (8, 4, 1, "y", None),
            (9, 5, 0, "five", None),
            (10, 5, 1, "z", None),
        ]);
        let r = homonym_report(&kb);
        assert_eq!(r.total_names, 10);
        assert_eq!(r.homonyms, 2);
        assert!((r.fraction() - 0.2).abs() < 1e-12);
        assert_eq!(r.other_homonyms, 2);
        assert_eq!(r.cross_species_homonyms, None);
    }

    #[test]
    fn report_figure_one_fragment() {
        let kb = kb(&[
            (1, 30685, 0, "Patient Discharge", None),
            (2, 30685, 1, "Discharge", None),
            (3, 600083, 0, "Body Fluid Discharge", None),
            (4, 600083, 1, "Discharge", None),
        ]);
        let r = homonym_report(&kb);
        assert_eq!(r.preferred_name_homonyms, 0);
        assert_eq!(r.other_homonyms, 1);
        assert!(r.to_key_value().contains("homonyms_ratio: 1/4"));
        assert!(r.to_tsv().contains("Discharge\t2\t30685;600083\tfalse\ttrue\tfalse"));
    }

    #[test]
    fn report_a2m_fragment() {
        let kb = kb(&[
            (1, 2, 0, "A2M", Some(9606)),
            (2, 2, 1, "alpha-2-macroglobulin", Some(9606)),
            (3, 280705, 0, "A2M", Some(9913)),
        ]);
        let r = homonym_report(&kb);
        assert_eq!(r.preferred_name_homonyms, 1);
        assert_eq!(r.cross_species_homonyms, Some(1));
        assert_eq!(r.intra_species_homonyms, 0);
    }

    fn brute_force_intra(kb: &Kb) -> HomonymSet {
        let recs = kb.records();
        let mut out = HomonymSet::new();
        for a in recs {
            for b in recs {
                if a.name == b.name && a.species == b.species && a.identifier != b.identifier {
                    let e = out.entry(a.name.clone()).or_default();
                    e.insert(a.identifier);
                    e.insert(b.identifier);
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn intra_matches_pairwise_scan(
            rows in prop::collection::vec((0i64..6, 0usize..5, prop::option::of(0i64..2)), 0..25)
        ) {
            let vocab = ["a", "b", "c", "d", "e"];
            // one preferred name per entity plus the sampled rows as other names
            let mut records = Vec::new();
            let mut seen = std::collections::HashSet::new();
            let mut species = std::collections::HashMap::new();
            let mut uid = 0;
            for (e, v, sp) in rows {
                let sp = *species.entry(e).or_insert(sp);
                if seen.insert(e) {
                    records.push(KbRecord::new(uid, e, 0, format!("p{e}"), sp));
                    uid += 1;
                }
                if seen.insert(e * 100 + v as i64 + 1000) {
                    records.push(KbRecord::new(uid, e, 1, vocab[v], sp));
                    uid += 1;
                }
            }
            let kb = Kb::from_records(records, ParseOptions::default()).unwrap();
            let fast = find_homonyms(&kb);
            prop_assert_eq!(&fast, &brute_force_intra(&kb));
            for (name, ids) in &fast {
                prop_assert!(kb.entities_of(name).len() > 1);
                prop_assert!(ids.is_subset(&kb.entities_of(name)));
            }
            let r = homonym_report(&kb);
            prop_assert!(r.homonyms <= r.total_names);
            prop_assert_eq!(r.preferred_name_homonyms + r.other_homonyms, r.homonyms);
        }
    }
}
