//! Entity knowledge store: entities, aliases, types, and factual triples.
//!
//! The store is immutable after load and safe for unlimited concurrent
//! readers. Sampling operations take a caller-owned RNG and are otherwise
//! read-only.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type EntityId = String;
pub type RelationId = String;
pub type TypeId = String;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate entity id {id:?} at {path}:{line}")]
    DuplicateId {
        id: EntityId,
        path: String,
        line: usize,
    },
    #[error("entity {id:?} at {path}:{line} has an empty alias set")]
    EmptyAliases {
        id: EntityId,
        path: String,
        line: usize,
    },
    #[error("unknown entity {0:?}")]
    UnknownEntity(EntityId),
    #[error("entity {0:?} has no types")]
    NoTypes(EntityId),
    #[error("triple at {path}:{line} references unknown entity {id:?}")]
    UnresolvedTriple {
        id: EntityId,
        path: String,
        line: usize,
    },
}

/// One knowledge-store entity: canonical name plus alias and type sets.
///
/// Invariants: the alias set is non-empty and contains `name`; ids are
/// unique within a store. Aliases and types are kept sorted and
/// deduplicated so sampling and serialization are deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: EntityId,
    pub name: String,
    pub aliases: Vec<String>,
    pub types: Vec<TypeId>,
}

impl EntityRecord {
    /// Normalize a raw record: fold the name into the alias set, sort and
    /// deduplicate aliases and types.
    pub fn new(id: EntityId, name: String, aliases: Vec<String>, types: Vec<TypeId>) -> Self {
        let mut alias_set: BTreeSet<String> = aliases.into_iter().filter(|a| !a.is_empty()).collect();
        if !name.is_empty() {
            alias_set.insert(name.clone());
        }
        let type_set: BTreeSet<TypeId> = types.into_iter().filter(|t| !t.is_empty()).collect();
        EntityRecord {
            id,
            name,
            aliases: alias_set.into_iter().collect(),
            types: type_set.into_iter().collect(),
        }
    }
}

/// A factual statement `(subject, relation, object)` over store entities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

/// The deduplicated set of object entities observed for one relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub ids: Vec<EntityId>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.binary_search_by(|c| c.as_str().cmp(id)).is_ok()
    }
}

/// Normalize a surface string for alias indexing: case-folded,
/// whitespace-collapsed token sequence.
pub fn normalize_surface(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Indexed entity store. `type_index` and `alias_index` are exact inverses
/// of the entity records they index.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeStore {
    entities: BTreeMap<EntityId, EntityRecord>,
    type_index: BTreeMap<TypeId, BTreeSet<EntityId>>,
    alias_index: BTreeMap<String, BTreeSet<EntityId>>,
}

#[derive(Debug, Deserialize)]
struct RawEntityLine {
    id: String,
    name: String,
    #[serde(default)]
    aliases: Vec<String>,
    #[serde(default)]
    types: Vec<String>,
}

impl KnowledgeStore {
    /// Load entities from a JSON-Lines file, one object per line:
    /// `{"id": str, "name": str, "aliases": [str], "types": [str]}`.
    pub fn load_entities(path: &Path) -> Result<KnowledgeStore, KbError> {
        let display = path.display().to_string();
        let file = fs::File::open(path).map_err(|source| KbError::Io {
            path: display.clone(),
            source,
        })?;
        let reader = BufReader::new(file);
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|source| KbError::Io {
                path: display.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawEntityLine =
                serde_json::from_str(&line).map_err(|e| KbError::Parse {
                    path: display.clone(),
                    line: line_no,
                    message: e.to_string(),
                })?;
            if raw.id.is_empty() {
                return Err(KbError::Parse {
                    path: display.clone(),
                    line: line_no,
                    message: "empty entity id".into(),
                });
            }
            let record = EntityRecord::new(raw.id, raw.name, raw.aliases, raw.types);
            if record.aliases.is_empty() {
                return Err(KbError::EmptyAliases {
                    id: record.id,
                    path: display.clone(),
                    line: line_no,
                });
            }
            records.push((line_no, record));
        }
        Self::from_records_with_lines(records, &display)
    }

    /// Build a store from in-memory records. Duplicate ids are rejected.
    pub fn from_records(records: Vec<EntityRecord>) -> Result<KnowledgeStore, KbError> {
        Self::from_records_with_lines(
            records.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect(),
            "<memory>",
        )
    }

    fn from_records_with_lines(
        records: Vec<(usize, EntityRecord)>,
        path: &str,
    ) -> Result<KnowledgeStore, KbError> {
        let mut store = KnowledgeStore::default();
        for (line, record) in records {
            if record.aliases.is_empty() {
                return Err(KbError::EmptyAliases {
                    id: record.id,
                    path: path.to_string(),
                    line,
                });
            }
            if store.entities.contains_key(&record.id) {
                return Err(KbError::DuplicateId {
                    id: record.id,
                    path: path.to_string(),
                    line,
                });
            }
            for ty in &record.types {
                store
                    .type_index
                    .entry(ty.clone())
                    .or_default()
                    .insert(record.id.clone());
            }
            for alias in &record.aliases {
                store
                    .alias_index
                    .entry(normalize_surface(alias))
                    .or_default()
                    .insert(record.id.clone());
            }
            store.entities.insert(record.id.clone(), record);
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EntityRecord> {
        self.entities.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entities.contains_key(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &EntityRecord> {
        self.entities.values()
    }

    /// All entities carrying `ty`.
    pub fn type_members(&self, ty: &str) -> Option<&BTreeSet<EntityId>> {
        self.type_index.get(ty)
    }

    /// Entities whose alias set contains a surface normalizing to `surface`.
    pub fn entities_by_alias(&self, surface: &str) -> Option<&BTreeSet<EntityId>> {
        self.alias_index.get(&normalize_surface(surface))
    }

    /// Pick one of `e`'s types uniformly at random, then return every other
    /// entity of that type. The result may be empty when `e` is the only
    /// entity of the chosen type.
    pub fn same_type_pool<R: Rng>(&self, e: &str, rng: &mut R) -> Result<Vec<EntityId>, KbError> {
        let record = self
            .entities
            .get(e)
            .ok_or_else(|| KbError::UnknownEntity(e.to_string()))?;
        if record.types.is_empty() {
            return Err(KbError::NoTypes(e.to_string()));
        }
        let ty = &record.types[rng.gen_range(0..record.types.len())];
        Ok(self.pool_of_type(e, ty))
    }

    /// Every entity of `ty` except `e`, in id order.
    pub fn pool_of_type(&self, e: &str, ty: &str) -> Vec<EntityId> {
        match self.type_index.get(ty) {
            Some(members) => members.iter().filter(|id| id.as_str() != e).cloned().collect(),
            None => Vec::new(),
        }
    }

    /// The subset of `e`'s types that have at least one other member.
    /// An entity is replaceable iff this is non-empty.
    pub fn types_with_peers(&self, e: &str) -> Result<Vec<&TypeId>, KbError> {
        let record = self
            .entities
            .get(e)
            .ok_or_else(|| KbError::UnknownEntity(e.to_string()))?;
        Ok(record
            .types
            .iter()
            .filter(|ty| {
                self.type_index
                    .get(ty.as_str())
                    .map(|members| members.iter().any(|id| id != e))
                    .unwrap_or(false)
            })
            .collect())
    }

    /// Draw a surface string uniformly from `e`'s alias set.
    pub fn sample_alias<R: Rng>(&self, e: &str, rng: &mut R) -> Result<&str, KbError> {
        let record = self
            .entities
            .get(e)
            .ok_or_else(|| KbError::UnknownEntity(e.to_string()))?;
        Ok(&record.aliases[rng.gen_range(0..record.aliases.len())])
    }

    /// Persist the store (and its triples) to a directory in canonical form.
    pub fn save_dir(&self, triples: &[Triple], dir: &Path) -> Result<(), KbError> {
        fs::create_dir_all(dir).map_err(|source| KbError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let ent_path = dir.join("entities.jsonl");
        let mut out = Vec::new();
        for record in self.entities.values() {
            serde_json::to_writer(&mut out, record).expect("record serialization");
            out.push(b'\n');
        }
        fs::write(&ent_path, out).map_err(|source| KbError::Io {
            path: ent_path.display().to_string(),
            source,
        })?;

        let tri_path = dir.join("triples.tsv");
        let mut out = Vec::new();
        for t in triples {
            writeln!(out, "{}\t{}\t{}", t.subject, t.relation, t.object).expect("write to vec");
        }
        fs::write(&tri_path, out).map_err(|source| KbError::Io {
            path: tri_path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    /// Load a store directory written by [`KnowledgeStore::save_dir`].
    pub fn load_dir(dir: &Path) -> Result<(KnowledgeStore, Vec<Triple>), KbError> {
        let store = Self::load_entities(&dir.join("entities.jsonl"))?;
        let triples = load_triples(&dir.join("triples.tsv"))?;
        validate_triples(&store, &triples, &dir.join("triples.tsv").display().to_string())?;
        Ok((store, triples))
    }
}

/// Load triples from a TSV file: `subject<TAB>relation<TAB>object`, no header.
pub fn load_triples(path: &Path) -> Result<Vec<Triple>, KbError> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| KbError::Io {
        path: display.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut triples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| KbError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (subject, relation, object) = match (fields.next(), fields.next(), fields.next()) {
            (Some(s), Some(r), Some(o)) if fields.next().is_none() => (s, r, o),
            _ => {
                return Err(KbError::Parse {
                    path: display.clone(),
                    line: line_no,
                    message: "expected exactly 3 tab-separated columns".into(),
                })
            }
        };
        if subject.is_empty() || relation.is_empty() || object.is_empty() {
            return Err(KbError::Parse {
                path: display.clone(),
                line: line_no,
                message: "empty field".into(),
            });
        }
        triples.push(Triple {
            subject: subject.to_string(),
            relation: relation.to_string(),
            object: object.to_string(),
        });
    }
    Ok(triples)
}

/// Check that every triple endpoint resolves in the store.
pub fn validate_triples(
    store: &KnowledgeStore,
    triples: &[Triple],
    path: &str,
) -> Result<(), KbError> {
    for (idx, t) in triples.iter().enumerate() {
        for id in [&t.subject, &t.object] {
            if !store.contains(id) {
                return Err(KbError::UnresolvedTriple {
                    id: id.clone(),
                    path: path.to_string(),
                    line: idx + 1,
                });
            }
        }
    }
    Ok(())
}

/// The deduplicated set of all object entities of `relation`, in id order.
/// An unknown relation yields an empty set.
pub fn object_candidates(triples: &[Triple], relation: &str) -> CandidateSet {
    let ids: BTreeSet<EntityId> = triples
        .iter()
        .filter(|t| t.relation == relation)
        .map(|t| t.object.clone())
        .collect();
    CandidateSet {
        ids: ids.into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn record(id: &str, name: &str, aliases: &[&str], types: &[&str]) -> EntityRecord {
        EntityRecord::new(
            id.to_string(),
            name.to_string(),
            aliases.iter().map(|s| s.to_string()).collect(),
            types.iter().map(|s| s.to_string()).collect(),
        )
    }

    fn city_store() -> KnowledgeStore {
        KnowledgeStore::from_records(vec![
            record("Q90", "Paris", &["Paris"], &["city"]),
            record("Q64", "Berlin", &["Berlin"], &["city"]),
            record("Q1490", "Tokyo", &["Tokyo"], &["city"]),
        ])
        .unwrap()
    }

    #[test]
    fn loads_three_valid_lines_with_consistent_type_index() {
        let f = write_lines(&[
            r#"{"id":"Q90","name":"Paris","aliases":["Paris","City of Light"],"types":["city"]}"#,
            r#"{"id":"Q142","name":"France","aliases":["France"],"types":["country"]}"#,
            r#"{"id":"Q64","name":"Berlin","aliases":[],"types":["city"]}"#,
        ]);
        let store = KnowledgeStore::load_entities(f.path()).unwrap();
        assert_eq!(store.len(), 3);
        let cities = store.type_members("city").unwrap();
        assert_eq!(cities.len(), 2);
        assert!(cities.contains("Q90") && cities.contains("Q64"));
        // name folded into aliases even when the file's alias list is empty
        assert_eq!(store.get("Q64").unwrap().aliases, vec!["Berlin"]);
    }

    #[test]
    fn duplicate_id_is_rejected_with_line_number() {
        let f = write_lines(&[
            r#"{"id":"Q90","name":"Paris","aliases":["Paris"],"types":["city"]}"#,
            r#"{"id":"Q90","name":"Paris again","aliases":["Paris"],"types":["city"]}"#,
        ]);
        match KnowledgeStore::load_entities(f.path()) {
            Err(KbError::DuplicateId { id, line, .. }) => {
                assert_eq!(id, "Q90");
                assert_eq!(line, 2);
            }
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_names_the_line() {
        let f = write_lines(&[
            r#"{"id":"Q90","name":"Paris","aliases":["Paris"],"types":["city"]}"#,
            r#"{"id": nope}"#,
        ]);
        match KnowledgeStore::load_entities(f.path()) {
            Err(KbError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn empty_alias_set_is_rejected() {
        let f = write_lines(&[r#"{"id":"Q1","name":"","aliases":[],"types":["city"]}"#]);
        match KnowledgeStore::load_entities(f.path()) {
            Err(KbError::EmptyAliases { id, line, .. }) => {
                assert_eq!(id, "Q1");
                assert_eq!(line, 1);
            }
            other => panic!("expected EmptyAliases, got {other:?}"),
        }
    }

    /// Brute-force inverted-index oracle: every alias of every entity in a
    /// 50-entity store is found via the alias index, and agrees with a
    /// linear scan over all records.
    #[test]
    fn alias_index_matches_linear_scan_on_synthetic_store() {
        let mut records = Vec::new();
        for i in 0..50 {
            let id = format!("E{i:02}");
            let name = format!("Name{i:02}");
            let aliases = vec![
                name.clone(),
                format!("Alias {i:02}"),
                format!("ALIAS {i:02}"), // normalizes onto the previous one
            ];
            records.push(EntityRecord::new(
                id,
                name,
                aliases,
                vec![format!("type{}", i % 5)],
            ));
        }
        let store = KnowledgeStore::from_records(records.clone()).unwrap();
        for rec in &records {
            for alias in &rec.aliases {
                let via_index = store.entities_by_alias(alias).unwrap();
                assert!(via_index.contains(&rec.id), "missing {} for {alias:?}", rec.id);
                let via_scan: BTreeSet<EntityId> = records
                    .iter()
                    .filter(|r| {
                        r.aliases
                            .iter()
                            .any(|a| normalize_surface(a) == normalize_surface(alias))
                    })
                    .map(|r| r.id.clone())
                    .collect();
                assert_eq!(via_index, &via_scan);
            }
        }
    }

    #[test]
    fn same_type_pool_excludes_the_entity_itself() {
        let store = city_store();
        let mut rng = substream(1, &["kb", "pool"]);
        let pool = store.same_type_pool("Q90", &mut rng).unwrap();
        assert_eq!(pool, vec!["Q1490".to_string(), "Q64".to_string()]);
    }

    #[test]
    fn sole_member_of_its_type_gets_an_empty_pool() {
        let store = KnowledgeStore::from_records(vec![record(
            "Q90",
            "Paris",
            &["Paris"],
            &["city"],
        )])
        .unwrap();
        let mut rng = substream(2, &["kb", "pool"]);
        assert!(store.same_type_pool("Q90", &mut rng).unwrap().is_empty());
    }

    #[test]
    fn unknown_entity_and_zero_types_are_errors() {
        let store = KnowledgeStore::from_records(vec![record("Q1", "A", &["A"], &[])]).unwrap();
        let mut rng = substream(3, &["kb", "pool"]);
        assert!(matches!(
            store.same_type_pool("missing", &mut rng),
            Err(KbError::UnknownEntity(_))
        ));
        assert!(matches!(
            store.same_type_pool("Q1", &mut rng),
            Err(KbError::NoTypes(_))
        ));
    }

    /// Uniform type choice: with two types, 10000 draws land ~5000 on each.
    #[test]
    fn type_choice_is_uniform_over_the_type_set() {
        let store = KnowledgeStore::from_records(vec![
            record("P", "Paris", &["Paris"], &["city", "capital"]),
            record("B", "Berlin", &["Berlin"], &["city"]),
            record("L", "London", &["London"], &["capital"]),
        ])
        .unwrap();
        let mut rng = substream(4, &["kb", "uniform-type"]);
        let mut city_draws = 0u32;
        for _ in 0..10_000 {
            let pool = store.same_type_pool("P", &mut rng).unwrap();
            // type "city" yields {B}, type "capital" yields {L}
            match pool.as_slice() {
                [b] if b == "B" => city_draws += 1,
                [l] if l == "L" => {}
                other => panic!("unexpected pool {other:?}"),
            }
        }
        assert!(
            (4700..=5300).contains(&city_draws),
            "city chosen {city_draws} times out of 10000"
        );
    }

    #[test]
    fn singleton_alias_set_always_returns_it() {
        let store = KnowledgeStore::from_records(vec![record("Q60", "NYC", &["NYC"], &["city"])])
            .unwrap();
        let mut rng = substream(5, &["kb", "alias"]);
        assert_eq!(store.sample_alias("Q60", &mut rng).unwrap(), "NYC");
    }

    /// Frequency-count oracle: two aliases drawn 10000 times are each
    /// sampled ~5000 times.
    #[test]
    fn alias_sampling_is_uniform() {
        let store = KnowledgeStore::from_records(vec![record(
            "Q60",
            "NYC",
            &["NYC", "New York"],
            &["city"],
        )])
        .unwrap();
        let mut rng = substream(6, &["kb", "alias-uniform"]);
        let mut nyc = 0u32;
        for _ in 0..10_000 {
            if store.sample_alias("Q60", &mut rng).unwrap() == "NYC" {
                nyc += 1;
            }
        }
        assert!((4700..=5300).contains(&nyc), "NYC drawn {nyc} times");
    }

    #[test]
    fn sample_alias_unknown_entity_is_an_error() {
        let store = city_store();
        let mut rng = substream(7, &["kb", "alias-missing"]);
        assert!(matches!(
            store.sample_alias("nope", &mut rng),
            Err(KbError::UnknownEntity(_))
        ));
    }

    #[test]
    fn object_candidates_deduplicates_and_handles_unknown_relations() {
        let triples = vec![
            Triple { subject: "a".into(), relation: "r1".into(), object: "x".into() },
            Triple { subject: "b".into(), relation: "r1".into(), object: "x".into() },
            Triple { subject: "c".into(), relation: "r2".into(), object: "y".into() },
        ];
        assert_eq!(object_candidates(&triples, "r1").ids, vec!["x".to_string()]);
        assert_eq!(object_candidates(&triples, "r2").len(), 1);
        assert!(object_candidates(&triples, "r9").is_empty());
    }

    /// Linear-scan oracle over a synthetic 3-relation triple set.
    #[test]
    fn object_candidates_matches_brute_force_scan() {
        let mut rng = substream(8, &["kb", "cands"]);
        let mut triples = Vec::new();
        for _ in 0..200 {
            triples.push(Triple {
                subject: format!("s{}", rng.gen_range(0..20)),
                relation: format!("r{}", rng.gen_range(0..3)),
                object: format!("o{}", rng.gen_range(0..15)),
            });
        }
        for rel in ["r0", "r1", "r2"] {
            let expected: BTreeSet<String> = triples
                .iter()
                .filter(|t| t.relation == rel)
                .map(|t| t.object.clone())
                .collect();
            let got = object_candidates(&triples, rel);
            assert_eq!(got.ids, expected.into_iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn triples_roundtrip_through_store_dir() {
        let dir = tempfile::tempdir().unwrap();
        let store = city_store();
        let triples = vec![Triple {
            subject: "Q90".into(),
            relation: "inside".into(),
            object: "Q64".into(),
        }];
        store.save_dir(&triples, dir.path()).unwrap();
        let (loaded, loaded_triples) = KnowledgeStore::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded_triples, triples);
    }

    #[test]
    fn malformed_triple_line_is_reported() {
        let f = write_lines(&["a\tr\tb", "broken line"]);
        match load_triples(f.path()) {
            Err(KbError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected Parse, got {other:?}"),
        }
    }
}
