use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    bundled_relations, entity_surfaces, format_answers, mask_sentinel, DatasetBundle, Entity,
    EntityId, ExampleId, Fact, FactAnnotation, FactId, MaskedExample, RelationTemplate, Role,
    SentenceId, Split, MASK,
};
use crate::error::{Error, Result};

/// Masking patterns for a two-fact sentence, in enumeration order. The first
/// two mask each entity of each fact exactly once across the pair.
const MASKING_PATTERNS: [(Role, Role); 4] = [
    (Role::Object, Role::Subject),
    (Role::Subject, Role::Object),
    (Role::Object, Role::Object),
    (Role::Subject, Role::Subject),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_entities: u32,
    pub n_facts: usize,
    /// Number of attribution sentences each fact is rendered in.
    pub pairings_per_fact: usize,
    /// Maskings generated per sentence, `1..=4`.
    pub maskings_per_sentence: usize,
    pub n_query_facts: usize,
    /// Lexical variants rendered per query fact.
    #[serde(default = "default_query_variants")]
    pub query_variants: usize,
    /// Entities held out of the pretraining corpus. Query facts then have a
    /// held-out object, which makes them novel to a pretrained model. Zero
    /// disables the split and only holds out the query facts themselves.
    #[serde(default)]
    pub novel_entities: u32,
    /// When false every rendering uses paraphrase 0 and surface form 0.
    #[serde(default = "default_true")]
    pub lexical_variation: bool,
    pub seed: u64,
}

fn default_query_variants() -> usize {
    2
}

fn default_true() -> bool {
    true
}

impl GenConfig {
    pub fn small(seed: u64) -> Self {
        GenConfig {
            n_entities: 10,
            n_facts: 10,
            pairings_per_fact: 2,
            maskings_per_sentence: 2,
            n_query_facts: 5,
            query_variants: 2,
            novel_entities: 0,
            lexical_variation: true,
            seed,
        }
    }

    fn validate(&self, n_relations: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_entities < 2 {
            return fail(format!("need at least 2 entities, got {}", self.n_entities));
        }
        if self.n_entities > super::MAX_ROMAN {
            return fail(format!("at most {} entities are supported", super::MAX_ROMAN));
        }
        if self.n_facts < 2 {
            return fail(format!("need at least 2 facts, got {}", self.n_facts));
        }
        let capacity = self.n_entities as usize * n_relations;
        if self.n_facts > capacity {
            return fail(format!(
                "{} facts exceed the {capacity} distinct (subject, relation) pairs",
                self.n_facts
            ));
        }
        if self.pairings_per_fact == 0 {
            return fail("pairings_per_fact must be positive".into());
        }
        if !(1..=MASKING_PATTERNS.len()).contains(&self.maskings_per_sentence) {
            return fail(format!(
                "maskings_per_sentence must be in 1..=4, got {}",
                self.maskings_per_sentence
            ));
        }
        if self.n_query_facts == 0 || self.n_query_facts > self.n_facts {
            return fail(format!(
                "n_query_facts must be in 1..={}, got {}",
                self.n_facts, self.n_query_facts
            ));
        }
        if !(1..=4).contains(&self.query_variants) {
            return fail(format!("query_variants must be in 1..=4, got {}", self.query_variants));
        }
        if self.novel_entities >= self.n_entities {
            return fail("novel_entities must leave at least one base entity".into());
        }
        Ok(())
    }
}

/// Renders one fact as a clause with the `masked_role` entity replaced by
/// [`MASK`]. Returns the clause and the masked entity's surface.
pub fn render_fact(
    relations: &[RelationTemplate],
    fact: &Fact,
    paraphrase: usize,
    subject_surface: usize,
    object_surface: usize,
    masked_role: Role,
) -> Result<(String, String)> {
    let relation = relations
        .iter()
        .find(|r| r.id == fact.predicate)
        .ok_or_else(|| Error::InvalidInput(format!("unknown relation id {}", fact.predicate)))?;
    let pick = |id: EntityId, index: usize| -> Result<String> {
        let surfaces = entity_surfaces(id)?;
        surfaces
            .get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("surface index {index} out of range 0..4")))
    };
    let subject = pick(fact.subject, subject_surface)?;
    let object = pick(fact.object, object_surface)?;
    let (clause, answer) = match masked_role {
        Role::Subject => (relation.fill(paraphrase, MASK, &object)?, subject),
        Role::Object => (relation.fill(paraphrase, &subject, MASK)?, object),
    };
    Ok((clause, answer))
}

fn number_mask(clause: &str, index: usize) -> String {
    clause.replacen(MASK, &mask_sentinel(index), 1)
}

/// Generates the full corpus. A pure function of `config`.
pub fn build_bundle(config: &GenConfig) -> Result<DatasetBundle> {
    let relations = bundled_relations();
    config.validate(relations.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let entities = (1..=config.n_entities)
        .map(Entity::new)
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<EntityId> = (1..=config.n_entities).collect();
    order.shuffle(&mut rng);
    let novel: BTreeSet<EntityId> = order[..config.novel_entities as usize].iter().copied().collect();

    let facts = sample_facts(config, relations.len() as u32, &order, &mut rng);

    // Query facts: novel objects when entities are held out.
    let mut eligible: Vec<FactId> = facts
        .values()
        .filter(|f| config.novel_entities == 0 || novel.contains(&f.object))
        .map(|f| f.id)
        .collect();
    if eligible.len() < config.n_query_facts {
        return Err(Error::Config(format!(
            "only {} facts are eligible as queries, {} requested",
            eligible.len(),
            config.n_query_facts
        )));
    }
    eligible.shuffle(&mut rng);
    let query_facts: BTreeSet<FactId> = eligible[..config.n_query_facts].iter().copied().collect();

    let touches_novel = |f: &Fact| novel.contains(&f.subject) || novel.contains(&f.object);
    let (base_pool, novel_pool): (Vec<FactId>, Vec<FactId>) = facts
        .values()
        .map(|f| f.id)
        .partition(|id| {
            let f = &facts[id];
            !touches_novel(f) && !query_facts.contains(id)
        });

    let mut pairs = pair_facts(&base_pool, config.pairings_per_fact, &mut rng)?;
    pairs.extend(pair_facts(&novel_pool, config.pairings_per_fact, &mut rng)?);

    let surface_offset: BTreeMap<FactId, usize> =
        facts.keys().map(|&id| (id, rng.gen_range(0..4))).collect();
    let mut appearances: BTreeMap<FactId, usize> = BTreeMap::new();

    let mut attribution = Vec::new();
    let mut next_example = 0u32;
    for (sentence, &(first, second)) in pairs.iter().enumerate() {
        let mut renders = Vec::with_capacity(2);
        for id in [first, second] {
            let seen = appearances.entry(id).or_insert(0);
            let subject_surface = (surface_offset[&id] + *seen) % 4;
            *seen += 1;
            let object_surface = rng.gen_range(0..4);
            let paraphrase = rng.gen_range(0..relations[facts[&id].predicate as usize].paraphrases.len());
            renders.push(if config.lexical_variation {
                (facts[&id], paraphrase, subject_surface, object_surface)
            } else {
                (facts[&id], 0, 0, 0)
            });
        }
        for &(role_a, role_b) in &MASKING_PATTERNS[..config.maskings_per_sentence] {
            let mut clauses = Vec::with_capacity(2);
            let mut answers = Vec::with_capacity(2);
            let mut annotations = Vec::with_capacity(2);
            for (slot, (&(fact, para, ss, os), role)) in renders.iter().zip([role_a, role_b]).enumerate() {
                let (clause, answer) = render_fact(&relations, &fact, para, ss, os, role)?;
                clauses.push(number_mask(&clause, slot + 1));
                answers.push(answer);
                annotations.push(FactAnnotation {
                    fact_id: fact.id,
                    masked_role: role,
                });
            }
            attribution.push(MaskedExample {
                example_id: ExampleId(next_example),
                sentence_id: SentenceId(sentence as u32),
                split: Split::Attribution,
                input: clauses.join(" , "),
                output: format_answers(&answers),
                facts: annotations,
            });
            next_example += 1;
        }
    }

    let mut queries = Vec::new();
    let mut next_sentence = pairs.len() as u32;
    for &id in &query_facts {
        let fact = facts[&id];
        let mut subject_surfaces = [0usize, 1, 2, 3];
        subject_surfaces.shuffle(&mut rng);
        for &subject_surface in &subject_surfaces[..config.query_variants] {
            let paraphrase = rng.gen_range(0..relations[fact.predicate as usize].paraphrases.len());
            let object_surface = rng.gen_range(0..4);
            let (para, ss, os) = if config.lexical_variation {
                (paraphrase, subject_surface, object_surface)
            } else {
                (0, 0, 0)
            };
            let (clause, answer) = render_fact(&relations, &fact, para, ss, os, Role::Object)?;
            queries.push(MaskedExample {
                example_id: ExampleId(next_example),
                sentence_id: SentenceId(next_sentence),
                split: Split::Query,
                input: number_mask(&clause, 1),
                output: answer,
                facts: vec![FactAnnotation {
                    fact_id: id,
                    masked_role: Role::Object,
                }],
            });
            next_example += 1;
            next_sentence += 1;
        }
    }

    let proponents = DatasetBundle::index_proponents(&attribution);
    let bundle = DatasetBundle {
        config: Some(config.clone()),
        entities,
        relations,
        facts,
        attribution,
        queries,
        proponents,
        base_facts: base_pool.into_iter().collect(),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Samples facts with unique (subject, relation) pairs and subject != object.
/// When there are at least as many facts as entities, the first facts form a
/// cycle over `order` so every entity is both a subject and an object.
fn sample_facts(
    config: &GenConfig,
    n_relations: u32,
    order: &[EntityId],
    rng: &mut ChaCha8Rng,
) -> BTreeMap<FactId, Fact> {
    let n = order.len();
    let mut used: HashSet<(EntityId, u32)> = HashSet::new();
    let mut facts = BTreeMap::new();
    let push = |facts: &mut BTreeMap<FactId, Fact>, subject, predicate, object| {
        let id = FactId(facts.len() as u32);
        facts.insert(
            id,
            Fact {
                id,
                subject,
                predicate,
                object,
            },
        );
    };
    if config.n_facts >= n {
        for i in 0..n {
            let (subject, object) = (order[i], order[(i + 1) % n]);
            let predicate = rng.gen_range(0..n_relations);
            used.insert((subject, predicate));
            push(&mut facts, subject, predicate, object);
        }
    }
    while facts.len() < config.n_facts {
        let subject = rng.gen_range(1..=config.n_entities);
        let predicate = rng.gen_range(0..n_relations);
        if !used.insert((subject, predicate)) {
            continue;
        }
        let object = loop {
            let o = rng.gen_range(1..=config.n_entities);
            if o != subject {
                break o;
            }
        };
        push(&mut facts, subject, predicate, object);
    }
    facts
}

/// Pairs every fact of `pool` into `pairings` two-fact sentences. An odd slot
/// count gives one random fact an extra appearance.
fn pair_facts(pool: &[FactId], pairings: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(FactId, FactId)>> {
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    if pool.len() < 2 {
        return Err(Error::Config(format!(
            "cannot pair a fact pool of size {} into two-fact sentences",
            pool.len()
        )));
    }
    let mut slots: Vec<FactId> = pool
        .iter()
        .flat_map(|&id| std::iter::repeat(id).take(pairings))
        .collect();
    slots.shuffle(rng);
    if slots.len() % 2 == 1 {
        let last = *slots.last().unwrap();
        let extra = loop {
            let pick = pool[rng.gen_range(0..pool.len())];
            if pick != last {
                break pick;
            }
        };
        slots.push(extra);
    }
    for i in (0..slots.len()).step_by(2) {
        if slots[i] != slots[i + 1] {
            continue;
        }
        let fact = slots[i];
        let swap = (0..slots.len())
            .find(|&j| j / 2 != i / 2 && slots[j] != fact && slots[j ^ 1] != fact)
            .ok_or_else(|| Error::Config(format!("cannot pair fact {fact} without repeating it")))?;
        slots.swap(i + 1, swap);
    }
    Ok(slots.chunks(2).map(|c| (c[0], c[1])).collect())
}
