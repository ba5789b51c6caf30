//! Synthetic fact corpus: entities with four surface forms, paraphrased
//! relation templates, cloze-style attribution and query examples, and the
//! proponent index that ties them together.

mod generate;
mod io;
mod roman;
mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{build_bundle, render_fact, GenConfig};
pub use io::{ingest_external, read_bundle, write_bundle, EXAMPLES_FILE, MANIFEST_FILE};
pub use roman::{parse_roman, roman_numeral, MAX_ROMAN};
pub use templates::{bundled_relations, RelationTemplate, WRITTEN_IN};

/// Placeholder a rendered clause carries before the mask is numbered.
pub const MASK: &str = "\u{2423}";

/// Mask sentinel for answer slot `index` (1-based): `␣1`, `␣2`.
pub fn mask_sentinel(index: usize) -> String {
    format!("{MASK}{index}")
}

pub fn is_mask_token(token: &str) -> bool {
    token.contains(MASK)
}

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExampleId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SentenceId(pub u32);

impl fmt::Display for FactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ExampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub surfaces: Vec<String>,
}

impl Entity {
    pub fn new(id: EntityId) -> Result<Self> {
        Ok(Entity {
            id,
            surfaces: entity_surfaces(id)?.to_vec(),
        })
    }
}

/// `["{n}-entity", "entity-{n}", "{R}-entity", "entity-{R}"]`.
pub fn entity_surfaces(id: EntityId) -> Result<[String; 4]> {
    let roman = roman_numeral(id)?;
    Ok([
        format!("{id}-entity"),
        format!("entity-{id}"),
        format!("{roman}-entity"),
        format!("entity-{roman}"),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub id: FactId,
    pub subject: EntityId,
    pub predicate: RelationId,
    pub object: EntityId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Subject,
    Object,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Attribution,
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactAnnotation {
    pub fact_id: FactId,
    pub masked_role: Role,
}

/// A cloze example. `output` is the bare answer for a single mask and
/// `"1:a, 2:b"` for two.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub example_id: ExampleId,
    pub sentence_id: SentenceId,
    pub split: Split,
    pub input: String,
    pub output: String,
    pub facts: Vec<FactAnnotation>,
}

impl MaskedExample {
    pub fn input_words(&self) -> impl Iterator<Item = &str> {
        self.input.split_whitespace()
    }

    pub fn mask_count(&self) -> usize {
        self.input_words().filter(|w| is_mask_token(w)).count()
    }

    /// The answers in mask order.
    pub fn answers(&self) -> Vec<&str> {
        parse_answers(&self.output)
    }

    pub fn has_fact(&self, fact: FactId) -> bool {
        self.facts.iter().any(|a| a.fact_id == fact)
    }
}

/// Splits an output string into its answers, dropping `k:` index prefixes.
pub fn parse_answers(output: &str) -> Vec<&str> {
    let trimmed = output.trim();
    if !starts_with_index(trimmed) {
        return vec![trimmed];
    }
    trimmed
        .split(", ")
        .map(|part| strip_index_prefix(part.trim()))
        .collect()
}

/// Drops a leading `k:` answer index, if present.
pub fn strip_index_prefix(answer: &str) -> &str {
    let answer = answer.trim();
    if starts_with_index(answer) {
        let colon = answer.find(':').unwrap();
        answer[colon + 1..].trim()
    } else {
        answer
    }
}

fn starts_with_index(s: &str) -> bool {
    match s.find(':') {
        Some(pos) if pos > 0 => s[..pos].bytes().all(|b| b.is_ascii_digit()),
        _ => false,
    }
}

/// Joins answers back into the indexed output format.
pub fn format_answers<S: AsRef<str>>(answers: &[S]) -> String {
    match answers {
        [single] => single.as_ref().to_string(),
        many => many
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{}:{}", i + 1, a.as_ref()))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

/// Realized corpus statistics, recomputed from the bundle contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleStats {
    pub attribution_examples: usize,
    pub attribution_sentences: usize,
    pub query_examples: usize,
    pub attribution_facts: usize,
    pub query_facts: usize,
    pub unique_predicates: usize,
    pub unique_subjects: usize,
    pub unique_objects: usize,
    pub query_unique_predicates: usize,
    pub query_unique_subjects: usize,
    pub query_unique_objects: usize,
    pub avg_proponents: f64,
    pub min_proponents: usize,
    pub pretrain_examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub config: Option<GenConfig>,
    pub entities: Vec<Entity>,
    pub relations: Vec<RelationTemplate>,
    pub facts: BTreeMap<FactId, Fact>,
    pub attribution: Vec<MaskedExample>,
    pub queries: Vec<MaskedExample>,
    pub proponents: BTreeMap<FactId, BTreeSet<ExampleId>>,
    /// Facts known before the fine-tuning phase. Attribution examples whose
    /// facts are all in this set form the pretraining corpus.
    pub base_facts: BTreeSet<FactId>,
}

impl DatasetBundle {
    pub fn fact(&self, id: FactId) -> Option<&Fact> {
        self.facts.get(&id)
    }

    pub fn entity(&self, id: EntityId) -> Option<&Entity> {
        self.entities
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.entities[i])
    }

    /// Attribution examples used by the pretraining phase.
    pub fn pretrain_examples(&self) -> impl Iterator<Item = &MaskedExample> {
        self.attribution
            .iter()
            .filter(|ex| ex.facts.iter().all(|a| self.base_facts.contains(&a.fact_id)))
    }

    pub fn example(&self, id: ExampleId) -> Option<&MaskedExample> {
        let find = |set: &'_ [MaskedExample]| {
            set.binary_search_by_key(&id, |e| e.example_id).ok()
        };
        if let Some(i) = find(&self.attribution) {
            return Some(&self.attribution[i]);
        }
        find(&self.queries).map(|i| &self.queries[i])
    }

    pub fn proponents_of(&self, fact: FactId) -> Option<&BTreeSet<ExampleId>> {
        self.proponents.get(&fact)
    }

    /// Rebuilds the proponent index from attribution annotations.
    pub fn index_proponents(attribution: &[MaskedExample]) -> BTreeMap<FactId, BTreeSet<ExampleId>> {
        let mut index: BTreeMap<FactId, BTreeSet<ExampleId>> = BTreeMap::new();
        for ex in attribution {
            for ann in &ex.facts {
                index.entry(ann.fact_id).or_default().insert(ex.example_id);
            }
        }
        index
    }

    /// Every surface form of the entity in `role` of `fact`.
    pub fn surfaces_of(&self, fact: &Fact, role: Role) -> Option<&[String]> {
        let id = match role {
            Role::Subject => fact.subject,
            Role::Object => fact.object,
        };
        self.entity(id).map(|e| e.surfaces.as_slice())
    }

    pub fn stats(&self) -> BundleStats {
        let count_unique = |facts: &mut dyn Iterator<Item = &Fact>| {
            let (mut p, mut s, mut o) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
            for f in facts {
                p.insert(f.predicate);
                s.insert(f.subject);
                o.insert(f.object);
            }
            (p.len(), s.len(), o.len())
        };
        let attr_facts: BTreeSet<FactId> = self
            .attribution
            .iter()
            .flat_map(|e| e.facts.iter().map(|a| a.fact_id))
            .collect();
        let query_facts: BTreeSet<FactId> = self
            .queries
            .iter()
            .flat_map(|e| e.facts.iter().map(|a| a.fact_id))
            .collect();
        let (up, us, uo) = count_unique(&mut attr_facts.iter().filter_map(|id| self.facts.get(id)));
        let (qp, qs, qo) = count_unique(&mut query_facts.iter().filter_map(|id| self.facts.get(id)));
        let counts: Vec<usize> = query_facts
            .iter()
            .map(|f| self.proponents.get(f).map_or(0, |s| s.len()))
            .collect();
        let sentences: BTreeSet<SentenceId> = self.attribution.iter().map(|e| e.sentence_id).collect();
        BundleStats {
            attribution_examples: self.attribution.len(),
            attribution_sentences: sentences.len(),
            query_examples: self.queries.len(),
            attribution_facts: attr_facts.len(),
            query_facts: query_facts.len(),
            unique_predicates: up,
            unique_subjects: us,
            unique_objects: uo,
            query_unique_predicates: qp,
            query_unique_subjects: qs,
            query_unique_objects: qo,
            avg_proponents: if counts.is_empty() {
                0.0
            } else {
                counts.iter().sum::<usize>() as f64 / counts.len() as f64
            },
            min_proponents: counts.iter().copied().min().unwrap_or(0),
            pretrain_examples: self.pretrain_examples().count(),
        }
    }

    /// Checks the structural invariants every bundle must satisfy.
    pub fn validate(&self) -> Result<()> {
        for (id, fact) in &self.facts {
            if *id != fact.id {
                return Err(Error::Validation(format!("fact key {id} holds fact {}", fact.id)));
            }
            if fact.subject == fact.object {
                return Err(Error::Validation(format!("fact {id} has subject == object")));
            }
        }
        let mut seen = BTreeSet::new();
        for ex in self.attribution.iter().chain(&self.queries) {
            if !seen.insert(ex.example_id) {
                return Err(Error::Validation(format!("duplicate example id {}", ex.example_id)));
            }
            if ex.mask_count() != ex.answers().len() {
                return Err(Error::Validation(format!(
                    "example {} has {} masks but {} answers",
                    ex.example_id,
                    ex.mask_count(),
                    ex.answers().len()
                )));
            }
            for ann in &ex.facts {
                if !self.facts.contains_key(&ann.fact_id) {
                    return Err(Error::Validation(format!(
                        "example {} references unknown fact {}",
                        ex.example_id, ann.fact_id
                    )));
                }
            }
        }
        for q in &self.queries {
            for ann in &q.facts {
                match self.proponents.get(&ann.fact_id) {
                    Some(p) if !p.is_empty() => {}
                    _ => {
                        return Err(Error::Validation(format!(
                            "query {} fact {} has no proponent in the attribution set",
                            q.example_id, ann.fact_id
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}
