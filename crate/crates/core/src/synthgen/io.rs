//! JSONL example files plus a JSON manifest holding the entity, relation and
//! fact tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    BundleStats, DatasetBundle, Entity, ExampleId, Fact, FactAnnotation, FactId, GenConfig,
    MaskedExample, RelationTemplate, Role, SentenceId, Split,
};
use crate::error::{Error, Result};

pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: Option<GenConfig>,
    seed: Option<u64>,
    entities: Vec<Entity>,
    relations: Vec<RelationTemplate>,
    facts: Vec<Fact>,
    base_facts: Vec<FactId>,
    stats: BundleStats,
}

/// One line of the JSONL format. Fact annotations may optionally carry their
/// triple inline, which makes a file usable without a manifest.
#[derive(Debug, Serialize, Deserialize)]
struct ExampleRecord {
    example_id: ExampleId,
    sentence_id: SentenceId,
    split: Split,
    input: String,
    output: String,
    facts: Vec<AnnotationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    fact_id: FactId,
    masked_role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predicate: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object: Option<u32>,
}

/// Writes `examples.jsonl` and `manifest.json` into `dir`.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(EXAMPLES_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for ex in bundle.attribution.iter().chain(&bundle.queries) {
        let record = ExampleRecord {
            example_id: ex.example_id,
            sentence_id: ex.sentence_id,
            split: ex.split,
            input: ex.input.clone(),
            output: ex.output.clone(),
            facts: ex
                .facts
                .iter()
                .map(|a| AnnotationRecord {
                    fact_id: a.fact_id,
                    masked_role: a.masked_role,
                    subject: None,
                    predicate: None,
                    object: None,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: bundle.config.as_ref().map(|c| c.seed),
        config: bundle.config.clone(),
        entities: bundle.entities.clone(),
        relations: bundle.relations.clone(),
        facts: bundle.facts.values().copied().collect(),
        base_facts: bundle.base_facts.iter().copied().collect(),
        stats: bundle.stats(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a bundle directory written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<DatasetBundle> {
    ingest_external(&dir.join(EXAMPLES_FILE))
}

/// Loads a JSONL example file (or a directory containing `examples.jsonl`).
/// A `manifest.json` beside the file supplies the fact tables; without one,
/// every fact must be defined inline on at least one annotation.
pub fn ingest_external(path: &Path) -> Result<DatasetBundle> {
    let path: PathBuf = if path.is_dir() {
        path.join(EXAMPLES_FILE)
    } else {
        path.to_path_buf()
    };
    let manifest_path = path.with_file_name(MANIFEST_FILE);
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                path: manifest_path,
                line: 1,
                message: format!("unsupported format_version {}", m.format_version),
            });
        }
        Some(m)
    } else {
        None
    };

    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.clone(),
        line,
        message,
    };

    let mut facts: BTreeMap<FactId, Fact> = manifest
        .as_ref()
        .map(|m| m.facts.iter().map(|f| (f.id, *f)).collect())
        .unwrap_or_default();
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut attribution = Vec::new();
    let mut queries = Vec::new();
    let mut seen = BTreeSet::new();
    let mut first_use: BTreeMap<FactId, usize> = BTreeMap::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let lineno = index + 1;
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, format!("malformed example: {e}")))?;
        if !seen.insert(record.example_id) {
            return Err(parse_err(lineno, format!("duplicate example_id {}", record.example_id)));
        }
        let mut annotations = Vec::with_capacity(record.facts.len());
        for ann in &record.facts {
            first_use.entry(ann.fact_id).or_insert(lineno);
            match (ann.subject, ann.predicate, ann.object) {
                (Some(subject), Some(predicate), Some(object)) => {
                    let fact = Fact {
                        id: ann.fact_id,
                        subject,
                        predicate,
                        object,
                    };
                    match facts.get(&ann.fact_id) {
                        Some(existing) if *existing != fact => {
                            return Err(parse_err(
                                lineno,
                                format!("fact {} redefined with a different triple", ann.fact_id),
                            ))
                        }
                        _ => {
                            facts.insert(ann.fact_id, fact);
                        }
                    }
                }
                (None, None, None) => {}
                _ => {
                    return Err(parse_err(
                        lineno,
                        format!("fact {} has a partial inline triple", ann.fact_id),
                    ))
                }
            }
            annotations.push(FactAnnotation {
                fact_id: ann.fact_id,
                masked_role: ann.masked_role,
            });
        }
        let example = MaskedExample {
            example_id: record.example_id,
            sentence_id: record.sentence_id,
            split: record.split,
            input: record.input,
            output: record.output,
            facts: annotations,
        };
        if example.mask_count() != example.answers().len() {
            return Err(parse_err(
                lineno,
                format!(
                    "{} mask sentinels but {} answers",
                    example.mask_count(),
                    example.answers().len()
                ),
            ));
        }
        match example.split {
            Split::Attribution => attribution.push(example),
            Split::Query => queries.push(example),
        }
    }

    for (fact, line) in &first_use {
        if !facts.contains_key(fact) {
            return Err(parse_err(*line, format!("dangling reference to undefined fact {fact}")));
        }
    }
    attribution.sort_by_key(|e| e.example_id);
    queries.sort_by_key(|e| e.example_id);
    let proponents = DatasetBundle::index_proponents(&attribution);
    for q in &queries {
        for ann in &q.facts {
            if !proponents.contains_key(&ann.fact_id) {
                return Err(Error::Validation(format!(
                    "query {} references fact {} which no attribution example expresses",
                    q.example_id, ann.fact_id
                )));
            }
        }
    }

    let (config, entities, relations, base_facts) = match manifest {
        Some(m) => (m.config, m.entities, m.relations, m.base_facts.into_iter().collect()),
        None => (None, Vec::new(), Vec::new(), BTreeSet::new()),
    };
    let bundle = DatasetBundle {
        config,
        entities,
        relations,
        facts,
        attribution,
        queries,
        proponents,
        base_facts,
    };
    bundle.validate()?;
    Ok(bundle)
}
