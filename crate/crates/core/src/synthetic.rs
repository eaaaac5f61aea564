//! Seeded generator for small linking tasks with homonymous names.
//!
//! Entities get pseudo-word names. Groups of entities share an
//! abbreviation, and a few entities list another entity's preferred name
//! among their own names, so the KB carries both kinds of homonyms. Every
//! entity has a private set of topic words that surround its mentions,
//! which is the only signal separating entities behind a shared name.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, Mention};
use crate::kb::{EntityId, Kb, KbRecord, ParseOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub entities: usize,
    /// Names per entity, including the preferred one (at least 2).
    pub names_per_entity: usize,
    /// Number of abbreviations shared between two or three entities.
    pub shared_abbreviations: usize,
    /// Entities that also carry another entity's preferred name.
    pub preferred_collisions: usize,
    /// Probability that a mention of an entity with a shared name uses it.
    pub homonym_rate: f64,
    pub topic_words: usize,
    pub train_mentions: usize,
    pub test_mentions: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            entities: 50,
            names_per_entity: 6,
            shared_abbreviations: 12,
            preferred_collisions: 3,
            homonym_rate: 0.5,
            topic_words: 5,
            train_mentions: 500,
            test_mentions: 100,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub kb: Kb,
    pub train: Vec<Document>,
    pub test: Vec<Document>,
}

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const FILLERS: &[&str] = &[
    "patients", "with", "showed", "levels", "of", "the", "study", "reported", "increased", "in",
    "samples", "after", "treatment", "observed", "and", "cohort",
];
const OPENERS: &[&str] = &["Results", "Here", "Overall", "Notably", "Moreover", "Previously", "Clinically"];
const SUFFIXES: &[&str] = &["protein", "factor", "receptor", "syndrome", "kinase"];

struct Words {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Words {
    fn fresh(&mut self, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables)
                .flat_map(|_| {
                    [
                        *CONSONANTS.choose(&mut self.rng).unwrap(),
                        *VOWELS.choose(&mut self.rng).unwrap(),
                    ]
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn abbreviation(&mut self) -> String {
        loop {
            let letters: String = (0..3)
                .map(|_| CONSONANTS.choose(&mut self.rng).unwrap().to_ascii_uppercase())
                .collect();
            let w = format!("{letters}{}", self.rng.gen_range(1..10));
            if self.used.insert(w.to_lowercase()) {
                return w;
            }
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Entity {
    id: EntityId,
    names: Vec<String>,
    /// Names this entity shares with another entity.
    shared: Vec<String>,
    topic: Vec<String>,
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticTask {
    let n_names = cfg.names_per_entity.max(2);
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        used: HashSet::new(),
    };
    let mut entities: Vec<Entity> = (0..cfg.entities)
        .map(|i| {
            let w1 = capitalize(&words.fresh(3));
            let w2 = capitalize(&words.fresh(3));
            let suffix = SUFFIXES[i % SUFFIXES.len()];
            let pool = vec![
                format!("{w1} {w2}"),
                words.abbreviation(),
                w1.clone(),
                format!("{w1} {w2} {suffix}"),
                format!("{w1}-{w2}"),
                format!("{w2} {suffix}"),
                format!("{w2} {w1}"),
            ];
            let mut names: Vec<String> = pool.into_iter().take(n_names).collect();
            while names.len() < n_names {
                let extra = format!("{w1} {}", words.fresh(2));
                names.push(extra);
            }
            Entity {
                id: EntityId(1000 + i as i64),
                names,
                shared: Vec::new(),
                topic: (0..cfg.topic_words).map(|_| words.fresh(2)).collect(),
            }
        })
        .collect();

    // shared abbreviations over consecutive groups of two or three entities
    let mut next = 0;
    for g in 0..cfg.shared_abbreviations {
        let size = if g % 3 == 2 { 3 } else { 2 };
        if next + size > entities.len() {
            break;
        }
        let abbr = words.abbreviation();
        for e in &mut entities[next..next + size] {
            e.names[1] = abbr.clone();
            e.shared.push(abbr.clone());
        }
        next += size;
    }
    // preferred-name homonyms: entity j also carries entity i's preferred name
    for c in 0..cfg.preferred_collisions {
        let i = entities.len().saturating_sub(1 + 2 * c);
        let j = entities.len().saturating_sub(2 + 2 * c);
        if i == j || i >= entities.len() || j >= entities.len() {
            break;
        }
        let pref = entities[i].names[0].clone();
        let last = entities[j].names.len() - 1;
        entities[j].names[last] = pref.clone();
        entities[j].shared.push(pref.clone());
        entities[i].shared.push(pref);
    }

    let mut records = Vec::new();
    for e in &entities {
        for (k, name) in e.names.iter().enumerate() {
            let uid = records.len() as i64 + 1;
            records.push(KbRecord::new(uid, e.id.0, u32::from(k != 0), name, None));
        }
    }
    let kb = Kb::from_records(records, ParseOptions::default()).expect("generated KB is well formed");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let train = documents(&entities, cfg.train_mentions, cfg.homonym_rate, "train", &mut rng);
    let test = documents(&entities, cfg.test_mentions, cfg.homonym_rate, "test", &mut rng);
    SyntheticTask { kb, train, test }
}

fn documents(entities: &[Entity], total: usize, homonym_rate: f64, prefix: &str, rng: &mut ChaCha8Rng) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut produced = 0;
    // cycle through a shuffled entity order so every entity gets mentions
    let mut order: Vec<usize> = Vec::new();
    while produced < total {
        let sentences = rng.gen_range(2..=3).min(total - produced);
        if order.is_empty() {
            order = (0..entities.len()).collect();
            order.shuffle(rng);
        }
        let main = order.pop().expect("refilled above");
        let mut text = String::new();
        let mut mentions = Vec::new();
        for _ in 0..sentences {
            let e = if rng.gen_bool(0.7) { &entities[main] } else { entities.choose(rng).unwrap() };
            let surface = if !e.shared.is_empty() && rng.gen_bool(homonym_rate) {
                e.shared.choose(rng).unwrap().clone()
            } else {
                e.names.choose(rng).unwrap().clone()
            };
            let topic: Vec<&String> = e.topic.choose_multiple(rng, 3).collect();
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(OPENERS.choose(rng).unwrap());
            text.push(' ');
            text.push_str(FILLERS.choose(rng).unwrap());
            text.push_str(&format!(" {} {} ", topic[0], topic[1]));
            let start = text.chars().count();
            text.push_str(&surface);
            let end = text.chars().count();
            text.push_str(&format!(" {} {}.", topic[2], FILLERS.choose(rng).unwrap()));
            mentions.push(Mention {
                start,
                end,
                surface,
                gold: BTreeSet::from([e.id]),
                sentence: None,
            });
        }
        produced += mentions.len();
        docs.push(Document {
            id: format!("{prefix}-{:04}", docs.len()),
            text,
            sentences: None,
            mentions,
        });
    }
    docs
}
