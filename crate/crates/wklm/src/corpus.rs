//! Weakly supervised training-corpus construction.
//!
//! Documents arrive with anchor annotations. We recognize further mentions
//! of the anchored entities by alias matching, split documents into fixed
//! windows, and replicate each window several times with a non-adjacent
//! subset of its mentions replaced by same-type entities. Masking for the
//! language-model objective is restricted to positions outside entity spans.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{EntityId, KnowledgeStore};
use crate::rng::{substream, Stream};
use crate::span::Span;
use crate::tokenize::{tokenize, tokenize_with_offsets};
use crate::vocab::MASK_TOKEN;

#[derive(Debug, Error)]
pub enum CorpusError {
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
    #[error("invalid anchor in document {doc_id:?}: {message}")]
    InvalidAnchor { doc_id: String, message: String },
    #[error(transparent)]
    Kb(#[from] crate::kb::KbError),
}

/// Where a mention came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentionSource {
    Anchor,
    AliasMatch,
}

/// A token span linked to a knowledge-store entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub span: Span,
    pub entity: EntityId,
    pub source: MentionSource,
}

/// An anchor annotation in token coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anchor {
    pub span: Span,
    pub entity: EntityId,
}

/// A tokenized document with its anchor annotations.
#[derive(Debug, Clone)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub anchors: Vec<Anchor>,
}

/// A fixed-size window of a document carrying chunk-local mentions.
#[derive(Debug, Clone)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub tokens: Vec<String>,
    pub mentions: Vec<Mention>,
}

/// Whether a mention survived corruption unchanged or was replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Kept,
    Replaced,
}

/// Per-mention record in a training instance: the (possibly shifted) span,
/// the replacement label, the original entity and the surface entity whose
/// alias now occupies the span. For kept mentions the two ids coincide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionLabel {
    pub span: Span,
    pub label: Label,
    pub orig: EntityId,
    pub surf: EntityId,
}

/// A masked position together with the token it hid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSlot {
    pub pos: usize,
    pub orig: String,
}

/// One post-replacement training sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub doc_id: String,
    pub chunk_index: usize,
    pub replica: usize,
    pub tokens: Vec<String>,
    pub mention_labels: Vec<MentionLabel>,
    pub mask_slots: Vec<MaskSlot>,
}

// ---------------------------------------------------------------------------
// Document loading
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct RawAnchor {
    start: usize,
    end: usize,
    entity: String,
}

#[derive(Debug, Deserialize)]
struct RawDocument {
    doc_id: String,
    text: String,
    #[serde(default)]
    anchors: Vec<RawAnchor>,
}

/// Load documents from JSON Lines
/// `{"doc_id": str, "text": str, "anchors": [{"start","end","entity"}]}`.
/// Anchor character offsets are converted to token offsets here.
pub fn load_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: display.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        docs.push(document_from_raw(raw).map_err(|message| CorpusError::Parse {
            path: display.clone(),
            line: line_no,
            message,
        })?);
    }
    Ok(docs)
}

fn document_from_raw(raw: RawDocument) -> Result<Document, String> {
    let offset_tokens = tokenize_with_offsets(&raw.text);
    let n_chars = raw.text.chars().count();
    let mut anchors = Vec::with_capacity(raw.anchors.len());
    for a in &raw.anchors {
        if a.start >= a.end || a.end > n_chars {
            return Err(format!(
                "anchor [{}, {}) out of bounds in document {:?} ({} chars)",
                a.start, a.end, raw.doc_id, n_chars
            ));
        }
        // token span = all tokens overlapping the character range
        let mut tok_start = None;
        let mut tok_end = None;
        for (i, t) in offset_tokens.iter().enumerate() {
            if t.end > a.start && t.start < a.end {
                if tok_start.is_none() {
                    tok_start = Some(i);
                }
                tok_end = Some(i + 1);
            }
        }
        match (tok_start, tok_end) {
            (Some(s), Some(e)) => anchors.push(Anchor {
                span: Span::new(s, e),
                entity: a.entity.clone(),
            }),
            _ => {
                return Err(format!(
                    "anchor [{}, {}) covers no tokens in document {:?}",
                    a.start, a.end, raw.doc_id
                ))
            }
        }
    }
    anchors.sort_by_key(|a| a.span);
    for pair in anchors.windows(2) {
        if pair[0].span.overlaps(&pair[1].span) {
            return Err(format!(
                "anchors overlap in document {:?}: {:?} and {:?}",
                raw.doc_id, pair[0].span, pair[1].span
            ));
        }
    }
    Ok(Document {
        doc_id: raw.doc_id,
        tokens: offset_tokens.into_iter().map(|t| t.text).collect(),
        anchors,
    })
}

// ---------------------------------------------------------------------------
// Mention recognition
// ---------------------------------------------------------------------------

/// Turn anchors into mentions, then find further mentions of the anchored
/// entities by case-insensitive alias matching. Anchors referencing unknown
/// entities are skipped and counted. The result is non-overlapping and
/// sorted; where alias matches overlap, longer matches win.
pub fn recognize_mentions(
    doc: &Document,
    store: &KnowledgeStore,
) -> (Vec<Mention>, usize) {
    let mut skipped = 0usize;
    let mut mentions: Vec<Mention> = Vec::new();
    let mut anchored: BTreeSet<&str> = BTreeSet::new();
    for anchor in &doc.anchors {
        if store.contains(&anchor.entity) {
            anchored.insert(anchor.entity.as_str());
            mentions.push(Mention {
                span: anchor.span,
                entity: anchor.entity.clone(),
                source: MentionSource::Anchor,
            });
        } else {
            skipped += 1;
        }
    }

    let lower: Vec<String> = doc.tokens.iter().map(|t| t.to_lowercase()).collect();

    // candidate alias matches for anchored entities only
    let mut candidates: Vec<Mention> = Vec::new();
    for entity in &anchored {
        let record = store.get(entity).expect("anchored entity resolves");
        for alias in &record.aliases {
            let alias_toks: Vec<String> =
                tokenize(alias).iter().map(|t| t.to_lowercase()).collect();
            if alias_toks.is_empty() || alias_toks.len() > lower.len() {
                continue;
            }
            for start in 0..=(lower.len() - alias_toks.len()) {
                if lower[start..start + alias_toks.len()] == alias_toks[..] {
                    candidates.push(Mention {
                        span: Span::new(start, start + alias_toks.len()),
                        entity: (*entity).to_string(),
                        source: MentionSource::AliasMatch,
                    });
                }
            }
        }
    }

    // longest-match first at each start, then entity id for determinism
    candidates.sort_by(|a, b| {
        a.span
            .start
            .cmp(&b.span.start)
            .then(b.span.len().cmp(&a.span.len()))
            .then(a.entity.cmp(&b.entity))
    });
    for cand in candidates {
        if !mentions.iter().any(|m| m.span.overlaps(&cand.span)) {
            mentions.push(cand);
        }
    }
    mentions.sort_by_key(|m| m.span);
    (mentions, skipped)
}

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

/// Split a document into consecutive `chunk_size`-token windows (the final
/// window may be shorter). Mentions straddling a boundary are dropped;
/// retained mention spans are rebased to chunk-local coordinates.
pub fn chunk_document(doc: &Document, mentions: &[Mention], chunk_size: usize) -> Vec<Chunk> {
    assert!(chunk_size >= 2, "chunk_size must be at least 2");
    let mut chunks = Vec::new();
    let n = doc.tokens.len();
    let mut start = 0usize;
    let mut index = 0usize;
    while start < n {
        let end = (start + chunk_size).min(n);
        let window = Span::new(start, end);
        let local: Vec<Mention> = mentions
            .iter()
            .filter(|m| m.span.start >= window.start && m.span.end <= window.end)
            .map(|m| Mention {
                span: m.span.rebased(start),
                entity: m.entity.clone(),
                source: m.source,
            })
            .collect();
        chunks.push(Chunk {
            doc_id: doc.doc_id.clone(),
            index,
            tokens: doc.tokens[start..end].to_vec(),
            mentions: local,
        });
        start = end;
        index += 1;
    }
    chunks
}

// ---------------------------------------------------------------------------
// Corruption
// ---------------------------------------------------------------------------

/// Cross-replica memory of which negatives a replacement location has seen.
/// Draws at a location cycle through its pool without repetition; once the
/// pool is exhausted the cycle restarts.
type NegativeHistory = BTreeMap<usize, BTreeSet<EntityId>>;

fn corrupt_with_history<R: Rng>(
    chunk: &Chunk,
    store: &KnowledgeStore,
    rng: &mut R,
    history: &mut NegativeHistory,
    replica: usize,
) -> TrainingInstance {
    // A mention is eligible iff its entity has at least one type with peers.
    let eligible: Vec<bool> = chunk
        .mentions
        .iter()
        .map(|m| {
            store
                .types_with_peers(&m.entity)
                .map(|tys| !tys.is_empty())
                .unwrap_or(false)
        })
        .collect();

    // Propose each eligible mention with probability 0.5, then sweep left to
    // right demoting proposals adjacent to an already-accepted one.
    let mut accepted = vec![false; chunk.mentions.len()];
    for i in 0..chunk.mentions.len() {
        let proposed = eligible[i] && rng.gen_bool(0.5);
        accepted[i] = proposed && !(i > 0 && accepted[i - 1]);
    }
    if !accepted.iter().any(|&a| a) {
        if let Some(first) = eligible.iter().position(|&e| e) {
            accepted[first] = true;
        }
    }

    // Rebuild the token sequence, substituting accepted mentions.
    let mut tokens: Vec<String> = Vec::with_capacity(chunk.tokens.len());
    let mut labels: Vec<MentionLabel> = Vec::with_capacity(chunk.mentions.len());
    let mut cursor = 0usize;
    for (i, mention) in chunk.mentions.iter().enumerate() {
        tokens.extend_from_slice(&chunk.tokens[cursor..mention.span.start]);
        let new_start = tokens.len();
        if accepted[i] {
            let types = store
                .types_with_peers(&mention.entity)
                .expect("eligible mention entity resolves");
            let ty = types[rng.gen_range(0..types.len())].clone();
            let pool = store.pool_of_type(&mention.entity, &ty);
            let used = history.entry(i).or_default();
            let mut available: Vec<&EntityId> =
                pool.iter().filter(|id| !used.contains(*id)).collect();
            if available.is_empty() {
                used.clear();
                available = pool.iter().collect();
            }
            let negative = available[rng.gen_range(0..available.len())].clone();
            used.insert(negative.clone());
            let surface = store
                .sample_alias(&negative, rng)
                .expect("pool member resolves")
                .to_string();
            tokens.extend(tokenize(&surface));
            labels.push(MentionLabel {
                span: Span::new(new_start, tokens.len()),
                label: Label::Replaced,
                orig: mention.entity.clone(),
                surf: negative,
            });
        } else {
            tokens.extend_from_slice(&chunk.tokens[mention.span.start..mention.span.end]);
            labels.push(MentionLabel {
                span: Span::new(new_start, tokens.len()),
                label: Label::Kept,
                orig: mention.entity.clone(),
                surf: mention.entity.clone(),
            });
        }
        cursor = mention.span.end;
    }
    tokens.extend_from_slice(&chunk.tokens[cursor..]);

    TrainingInstance {
        doc_id: chunk.doc_id.clone(),
        chunk_index: chunk.index,
        replica,
        tokens,
        mention_labels: labels,
        mask_slots: Vec::new(),
    }
}

/// Corrupt a single chunk: mark a non-adjacent subset of mentions for
/// replacement (at least one when any mention is replaceable) and substitute
/// each with a sampled alias of a random same-type entity. When no mention
/// is replaceable the chunk contributes a positives-only instance.
pub fn corrupt_chunk<R: Rng>(
    chunk: &Chunk,
    store: &KnowledgeStore,
    rng: &mut R,
) -> TrainingInstance {
    let mut history = NegativeHistory::new();
    corrupt_with_history(chunk, store, rng, &mut history, 0)
}

/// Produce `replicas` corrupted instances of a chunk from independent RNG
/// substreams. Across replicas, each replacement location draws negatives
/// without repetition until its pool is exhausted, then the cycle restarts.
pub fn replicate<R: Rng>(
    chunk: &Chunk,
    store: &KnowledgeStore,
    rng: &mut R,
    replicas: usize,
) -> Vec<TrainingInstance> {
    assert!(replicas >= 1, "replicas must be at least 1");
    let seeds: Vec<u64> = (0..replicas).map(|_| rng.gen()).collect();
    let mut history = NegativeHistory::new();
    seeds
        .into_iter()
        .enumerate()
        .map(|(replica, seed)| {
            let mut replica_rng = Stream::seed_from_u64(seed);
            corrupt_with_history(chunk, store, &mut replica_rng, &mut history, replica)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

/// Mask `floor(mask_ratio * |non-mention positions|)` positions, chosen
/// uniformly without replacement outside all mention spans. Any previous
/// masking is undone first, so the operation can re-mask an instance.
pub fn apply_masking<R: Rng>(
    mut instance: TrainingInstance,
    mask_ratio: f64,
    rng: &mut R,
) -> TrainingInstance {
    assert!((0.0..=1.0).contains(&mask_ratio), "mask_ratio must be in [0,1]");
    for slot in instance.mask_slots.drain(..) {
        instance.tokens[slot.pos] = slot.orig;
    }
    let eligible: Vec<usize> = (0..instance.tokens.len())
        .filter(|&pos| !instance.mention_labels.iter().any(|m| m.span.contains(pos)))
        .collect();
    let n_masks = (mask_ratio * eligible.len() as f64).floor() as usize;
    if n_masks == 0 {
        return instance;
    }
    let mut chosen: Vec<usize> = index_sample(rng, eligible.len(), n_masks)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();
    instance.mask_slots = chosen
        .into_iter()
        .map(|pos| {
            let orig = std::mem::replace(&mut instance.tokens[pos], MASK_TOKEN.to_string());
            MaskSlot { pos, orig }
        })
        .collect();
    instance
}

// ---------------------------------------------------------------------------
// Instance file I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MentionLine {
    start: usize,
    end: usize,
    label: Label,
    orig: String,
    surf: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskLine {
    pos: usize,
    orig: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceLine {
    doc_id: String,
    chunk: usize,
    replica: usize,
    tokens: Vec<String>,
    mentions: Vec<MentionLine>,
    masks: Vec<MaskLine>,
}

impl From<&TrainingInstance> for InstanceLine {
    fn from(inst: &TrainingInstance) -> Self {
        InstanceLine {
            doc_id: inst.doc_id.clone(),
            chunk: inst.chunk_index,
            replica: inst.replica,
            tokens: inst.tokens.clone(),
            mentions: inst
                .mention_labels
                .iter()
                .map(|m| MentionLine {
                    start: m.span.start,
                    end: m.span.end,
                    label: m.label,
                    orig: m.orig.clone(),
                    surf: m.surf.clone(),
                })
                .collect(),
            masks: inst
                .mask_slots
                .iter()
                .map(|s| MaskLine {
                    pos: s.pos,
                    orig: s.orig.clone(),
                })
                .collect(),
        }
    }
}

impl InstanceLine {
    fn into_instance(self) -> Result<TrainingInstance, String> {
        let n = self.tokens.len();
        let mut mention_labels = Vec::with_capacity(self.mentions.len());
        for m in self.mentions {
            if m.start >= m.end || m.end > n {
                return Err(format!("mention span [{}, {}) out of bounds ({n} tokens)", m.start, m.end));
            }
            mention_labels.push(MentionLabel {
                span: Span::new(m.start, m.end),
                label: m.label,
                orig: m.orig,
                surf: m.surf,
            });
        }
        let mut mask_slots = Vec::with_capacity(self.masks.len());
        for s in self.masks {
            if s.pos >= n {
                return Err(format!("mask position {} out of bounds ({n} tokens)", s.pos));
            }
            if mention_labels.iter().any(|m| m.span.contains(s.pos)) {
                return Err(format!("mask position {} lies inside a mention span", s.pos));
            }
            mask_slots.push(MaskSlot {
                pos: s.pos,
                orig: s.orig,
            });
        }
        Ok(TrainingInstance {
            doc_id: self.doc_id,
            chunk_index: self.chunk,
            replica: self.replica,
            tokens: self.tokens,
            mention_labels,
            mask_slots,
        })
    }
}

/// Write instances as JSON Lines.
pub fn write_instances(instances: &[TrainingInstance], path: &Path) -> Result<(), CorpusError> {
    let display = path.display().to_string();
    let file = fs::File::create(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = BufWriter::new(file);
    for inst in instances {
        let line = InstanceLine::from(inst);
        serde_json::to_writer(&mut out, &line).map_err(|e| CorpusError::Parse {
            path: display.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n").map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
    }
    out.flush().map_err(|source| CorpusError::Io {
        path: display,
        source,
    })
}

/// Read instances back from JSON Lines, validating spans and mask positions.
pub fn read_instances(path: &Path) -> Result<Vec<TrainingInstance>, CorpusError> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: InstanceLine = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: display.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        instances.push(raw.into_instance().map_err(|message| CorpusError::Parse {
            path: display.clone(),
            line: line_no,
            message,
        })?);
    }
    Ok(instances)
}

// ---------------------------------------------------------------------------
// End-to-end corpus build
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildConfig {
    pub chunk_size: usize,
    pub replicas: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            chunk_size: 512,
            replicas: 10,
            mask_ratio: 0.05,
            seed: 0,
        }
    }
}

/// Corpus-build statistics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub chunks: usize,
    pub chunks_with_mentions: usize,
    pub mentions: usize,
    pub instances: usize,
    pub kept_mentions: usize,
    pub replaced_mentions: usize,
    pub skipped_anchors: usize,
}

impl CorpusStats {
    pub fn replaced_fraction(&self) -> f64 {
        let total = self.kept_mentions + self.replaced_mentions;
        if total == 0 {
            0.0
        } else {
            self.replaced_mentions as f64 / total as f64
        }
    }
}

/// Build the full training corpus. Documents are processed in parallel with
/// per-document RNG substreams derived from `(seed, doc_id)`, so the output
/// is ordered by document, then chunk, then replica, independent of
/// scheduling. Chunks without mentions are not emitted.
pub fn build_corpus(
    docs: &[Document],
    store: &KnowledgeStore,
    config: &BuildConfig,
) -> (Vec<TrainingInstance>, CorpusStats) {
    assert!(config.chunk_size >= 2, "chunk_size must be at least 2");
    assert!(config.replicas >= 1, "replicas must be at least 1");

    struct DocResult {
        instances: Vec<TrainingInstance>,
        chunks: usize,
        chunks_with_mentions: usize,
        mentions: usize,
        skipped_anchors: usize,
    }

    let results: Vec<DocResult> = docs
        .par_iter()
        .map(|doc| {
            let mut rng = substream(config.seed, &["corpus", &doc.doc_id]);
            let (mentions, skipped) = recognize_mentions(doc, store);
            let chunks = chunk_document(doc, &mentions, config.chunk_size);
            let mut instances = Vec::new();
            let mut with_mentions = 0usize;
            for chunk in &chunks {
                if chunk.mentions.is_empty() {
                    continue;
                }
                with_mentions += 1;
                for inst in replicate(chunk, store, &mut rng, config.replicas) {
                    instances.push(apply_masking(inst, config.mask_ratio, &mut rng));
                }
            }
            DocResult {
                instances,
                chunks: chunks.len(),
                chunks_with_mentions: with_mentions,
                mentions: mentions.len(),
                skipped_anchors: skipped,
            }
        })
        .collect();

    let mut stats = CorpusStats {
        documents: docs.len(),
        ..CorpusStats::default()
    };
    let mut all = Vec::new();
    for r in results {
        stats.chunks += r.chunks;
        stats.chunks_with_mentions += r.chunks_with_mentions;
        stats.mentions += r.mentions;
        stats.skipped_anchors += r.skipped_anchors;
        for inst in &r.instances {
            for m in &inst.mention_labels {
                match m.label {
                    Label::Kept => stats.kept_mentions += 1,
                    Label::Replaced => stats.replaced_mentions += 1,
                }
            }
        }
        stats.instances += r.instances.len();
        all.extend(r.instances);
    }
    (all, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::EntityRecord;

    fn record(id: &str, name: &str, aliases: &[&str], types: &[&str]) -> EntityRecord {
        EntityRecord::new(
            id.to_string(),
            name.to_string(),
            aliases.iter().map(|s| s.to_string()).collect(),
            types.iter().map(|s| s.to_string()).collect(),
        )
    }

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    fn small_store() -> KnowledgeStore {
        KnowledgeStore::from_records(vec![
            record("Q90", "Paris", &["Paris"], &["city"]),
            record("Q64", "Berlin", &["Berlin"], &["city"]),
            record("Q1490", "Tokyo", &["Tokyo"], &["city"]),
            record("Q60", "New York City", &["New York City", "New York", "NYC"], &["city"]),
            record("Q142", "France", &["France"], &["country"]),
            record("Q183", "Germany", &["Germany"], &["country"]),
        ])
        .unwrap()
    }

    fn doc(tokens: &[&str], anchors: &[(usize, usize, &str)]) -> Document {
        Document {
            doc_id: "d0".into(),
            tokens: toks(tokens),
            anchors: anchors
                .iter()
                .map(|(s, e, id)| Anchor {
                    span: Span::new(*s, *e),
                    entity: id.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn anchor_plus_alias_match_yields_two_mentions() {
        // Hand-traced 10-token document: anchor on position 0, a later
        // occurrence of "Paris" found by alias matching.
        let d = doc(
            &["Paris", "is", "big", ";", "people", "love", "paris", "in", "the", "spring"],
            &[(0, 1, "Q90")],
        );
        let (mentions, skipped) = recognize_mentions(&d, &small_store());
        assert_eq!(skipped, 0);
        assert_eq!(mentions.len(), 2);
        assert_eq!(mentions[0].span, Span::new(0, 1));
        assert_eq!(mentions[0].source, MentionSource::Anchor);
        assert_eq!(mentions[1].span, Span::new(6, 7)); // case-insensitive match
        assert_eq!(mentions[1].source, MentionSource::AliasMatch);
        assert_eq!(mentions[1].entity, "Q90");
    }

    #[test]
    fn no_anchors_means_no_mentions() {
        let d = doc(&["Paris", "and", "Berlin"], &[]);
        let (mentions, _) = recognize_mentions(&d, &small_store());
        assert!(mentions.is_empty());
    }

    #[test]
    fn unknown_anchor_entity_is_skipped_and_counted() {
        let d = doc(&["Paris", "x"], &[(0, 1, "Q404")]);
        let (mentions, skipped) = recognize_mentions(&d, &small_store());
        assert!(mentions.is_empty());
        assert_eq!(skipped, 1);
    }

    /// Longest-match rule: "New York" and "New York City" start at the same
    /// token; only the longer survives. Verified against exhaustive
    /// enumeration of all alias matches.
    #[test]
    fn overlapping_alias_matches_keep_the_longest() {
        let d = doc(
            &["He", "moved", "to", "New", "York", "City", "last", "year"],
            &[(3, 6, "Q60")],
        );
        let store = small_store();
        let (mentions, _) = recognize_mentions(&d, &store);
        assert_eq!(mentions.len(), 1);
        assert_eq!(mentions[0].span, Span::new(3, 6));

        // same document without the anchor covering everything: anchor on a
        // different sentence position, matches at 3 must prefer 3-token span
        let d2 = doc(
            &["NYC", "is", "called", "New", "York", "City", "or", "New", "York"],
            &[(0, 1, "Q60")],
        );
        let (mentions2, _) = recognize_mentions(&d2, &store);
        let spans: Vec<Span> = mentions2.iter().map(|m| m.span).collect();
        assert!(spans.contains(&Span::new(3, 6)), "longest match at 3 kept: {spans:?}");
        assert!(!spans.contains(&Span::new(3, 5)), "shorter match dropped: {spans:?}");
        assert!(spans.contains(&Span::new(7, 9)), "trailing match kept: {spans:?}");
        // brute force: every kept span is a valid alias match and no kept
        // spans overlap
        for pair in mentions2.windows(2) {
            assert!(!pair[0].span.overlaps(&pair[1].span));
        }
    }

    #[test]
    fn exact_division_gives_equal_chunks() {
        let tokens: Vec<String> = (0..1024).map(|i| format!("t{i}")).collect();
        let d = Document {
            doc_id: "d".into(),
            tokens,
            anchors: vec![],
        };
        let chunks = chunk_document(&d, &[], 512);
        assert_eq!(chunks.len(), 2);
        assert!(chunks.iter().all(|c| c.tokens.len() == 512));
    }

    #[test]
    fn boundary_straddling_mention_is_dropped_from_both_chunks() {
        let tokens: Vec<String> = (0..600).map(|i| format!("t{i}")).collect();
        let d = Document {
            doc_id: "d".into(),
            tokens,
            anchors: vec![],
        };
        let mentions = vec![Mention {
            span: Span::new(510, 514),
            entity: "Q90".into(),
            source: MentionSource::Anchor,
        }];
        let chunks = chunk_document(&d, &mentions, 512);
        assert_eq!(chunks.len(), 2);
        assert!(chunks.iter().all(|c| c.mentions.is_empty()));
    }

    /// Round-trip property over 1000 random documents: concatenating chunk
    /// tokens reproduces the document tokens.
    #[test]
    fn chunk_concatenation_reproduces_documents() {
        let mut rng = substream(11, &["corpus-test", "chunk-roundtrip"]);
        for _ in 0..1000 {
            let n = rng.gen_range(0..200);
            let tokens: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            let d = Document {
                doc_id: "d".into(),
                tokens: tokens.clone(),
                anchors: vec![],
            };
            let chunk_size = rng.gen_range(2..64);
            let chunks = chunk_document(&d, &[], chunk_size);
            let rebuilt: Vec<String> = chunks.into_iter().flat_map(|c| c.tokens).collect();
            assert_eq!(rebuilt, tokens);
        }
    }

    fn three_mention_chunk(store: &KnowledgeStore) -> Chunk {
        let _ = store;
        Chunk {
            doc_id: "d".into(),
            index: 0,
            tokens: toks(&["Paris", "then", "Berlin", "then", "Tokyo", "."]),
            mentions: vec![
                Mention { span: Span::new(0, 1), entity: "Q90".into(), source: MentionSource::Anchor },
                Mention { span: Span::new(2, 3), entity: "Q64".into(), source: MentionSource::Anchor },
                Mention { span: Span::new(4, 5), entity: "Q1490".into(), source: MentionSource::Anchor },
            ],
        }
    }

    /// Exhaustive adjacency check: with mentions at ordinal positions
    /// 0,1,2 the replaced set is always one of {0},{1},{2},{0,2}.
    #[test]
    fn adjacent_mentions_are_never_both_replaced() {
        let store = small_store();
        let chunk = three_mention_chunk(&store);
        let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut rng = substream(12, &["corpus-test", "adjacency"]);
        for _ in 0..10_000 {
            let inst = corrupt_chunk(&chunk, &store, &mut rng);
            let replaced: Vec<usize> = inst
                .mention_labels
                .iter()
                .enumerate()
                .filter(|(_, m)| m.label == Label::Replaced)
                .map(|(i, _)| i)
                .collect();
            seen.insert(replaced);
        }
        let allowed: BTreeSet<Vec<usize>> =
            [vec![0], vec![1], vec![2], vec![0, 2]].into_iter().collect();
        assert_eq!(seen, allowed);
    }

    #[test]
    fn single_mention_is_always_replaced() {
        let store = small_store();
        let chunk = Chunk {
            doc_id: "d".into(),
            index: 0,
            tokens: toks(&["visit", "Paris", "now"]),
            mentions: vec![Mention {
                span: Span::new(1, 2),
                entity: "Q90".into(),
                source: MentionSource::Anchor,
            }],
        };
        let mut rng = substream(13, &["corpus-test", "forced"]);
        for _ in 0..100 {
            let inst = corrupt_chunk(&chunk, &store, &mut rng);
            assert_eq!(inst.mention_labels.len(), 1);
            assert_eq!(inst.mention_labels[0].label, Label::Replaced);
            assert_ne!(inst.mention_labels[0].surf, "Q90");
        }
    }

    #[test]
    fn unreplaceable_mentions_yield_positives_only_instances() {
        // France is the only country besides Germany; remove Germany so the
        // pool is empty and nothing is replaceable.
        let store = KnowledgeStore::from_records(vec![
            record("Q142", "France", &["France"], &["country"]),
        ])
        .unwrap();
        let chunk = Chunk {
            doc_id: "d".into(),
            index: 0,
            tokens: toks(&["vive", "France", "!"]),
            mentions: vec![Mention {
                span: Span::new(1, 2),
                entity: "Q142".into(),
                source: MentionSource::Anchor,
            }],
        };
        let mut rng = substream(14, &["corpus-test", "positives-only"]);
        let inst = corrupt_chunk(&chunk, &store, &mut rng);
        assert_eq!(inst.mention_labels.len(), 1);
        assert_eq!(inst.mention_labels[0].label, Label::Kept);
        assert_eq!(inst.tokens, chunk.tokens);
    }

    /// Type-constraint oracle: over 10000 instances every replacement shares
    /// a type with the original, verified against the type index.
    #[test]
    fn replacements_always_share_a_type_with_the_original() {
        let store = small_store();
        let chunk = three_mention_chunk(&store);
        let mut rng = substream(15, &["corpus-test", "type-constraint"]);
        for _ in 0..10_000 {
            let inst = corrupt_chunk(&chunk, &store, &mut rng);
            for m in &inst.mention_labels {
                if m.label == Label::Replaced {
                    let orig_types: BTreeSet<&String> =
                        store.get(&m.orig).unwrap().types.iter().collect();
                    let surf_types: BTreeSet<&String> =
                        store.get(&m.surf).unwrap().types.iter().collect();
                    let shared: Vec<_> = orig_types.intersection(&surf_types).collect();
                    assert!(
                        !shared.is_empty(),
                        "replacement {} shares no type with {}",
                        m.surf,
                        m.orig
                    );
                    // spot-check against the index itself
                    let ty = shared[0];
                    assert!(store.type_members(ty).unwrap().contains(&m.surf));
                }
            }
        }
    }

    fn big_pool_store(n: usize) -> KnowledgeStore {
        let mut records = vec![record("seed", "Seed", &["Seed"], &["t"])];
        for i in 0..n {
            records.push(record(&format!("p{i:02}"), &format!("Peer{i:02}"), &[], &["t"]));
        }
        KnowledgeStore::from_records(records).unwrap()
    }

    fn single_mention_chunk() -> Chunk {
        Chunk {
            doc_id: "d".into(),
            index: 0,
            tokens: toks(&["the", "Seed", "shines"]),
            mentions: vec![Mention {
                span: Span::new(1, 2),
                entity: "seed".into(),
                source: MentionSource::Anchor,
            }],
        }
    }

    /// Set-cardinality check: pool of 30, 10 replicas → the 10 negatives at
    /// the single replacement location are pairwise distinct.
    #[test]
    fn negatives_are_distinct_while_the_pool_lasts() {
        let store = big_pool_store(30);
        let chunk = single_mention_chunk();
        let mut rng = substream(16, &["corpus-test", "distinct"]);
        let instances = replicate(&chunk, &store, &mut rng, 10);
        assert_eq!(instances.len(), 10);
        let negatives: BTreeSet<&String> = instances
            .iter()
            .map(|i| &i.mention_labels[0].surf)
            .collect();
        assert_eq!(negatives.len(), 10, "expected 10 distinct negatives");
    }

    /// Pigeonhole count: pool of 3, 10 replicas → every pool member appears
    /// at least 3 times at the location.
    #[test]
    fn exhausted_pools_cycle_through_all_members() {
        let store = big_pool_store(3);
        let chunk = single_mention_chunk();
        let mut rng = substream(17, &["corpus-test", "pigeonhole"]);
        let instances = replicate(&chunk, &store, &mut rng, 10);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for inst in &instances {
            *counts.entry(inst.mention_labels[0].surf.as_str()).or_default() += 1;
        }
        assert_eq!(counts.len(), 3);
        for (id, count) in counts {
            assert!(count >= 3, "{id} appeared only {count} times");
        }
    }

    #[test]
    fn replicas_one_yields_one_instance() {
        let store = big_pool_store(5);
        let chunk = single_mention_chunk();
        let mut rng = substream(18, &["corpus-test", "one-replica"]);
        assert_eq!(replicate(&chunk, &store, &mut rng, 1).len(), 1);
    }

    #[test]
    fn zero_mention_chunk_replicates_as_mlm_only() {
        let store = big_pool_store(3);
        let chunk = Chunk {
            doc_id: "d".into(),
            index: 0,
            tokens: toks(&["nothing", "here"]),
            mentions: vec![],
        };
        let mut rng = substream(19, &["corpus-test", "mlm-only"]);
        let instances = replicate(&chunk, &store, &mut rng, 4);
        assert_eq!(instances.len(), 4);
        assert!(instances.iter().all(|i| i.mention_labels.is_empty()));
    }

    fn unmasked_instance(tokens: &[&str], mention_spans: &[(usize, usize)]) -> TrainingInstance {
        TrainingInstance {
            doc_id: "d".into(),
            chunk_index: 0,
            replica: 0,
            tokens: toks(tokens),
            mention_labels: mention_spans
                .iter()
                .map(|(s, e)| MentionLabel {
                    span: Span::new(*s, *e),
                    label: Label::Kept,
                    orig: "Q90".into(),
                    surf: "Q90".into(),
                })
                .collect(),
            mask_slots: vec![],
        }
    }

    #[test]
    fn fully_covered_instance_gets_no_masks() {
        let inst = unmasked_instance(&["Paris", "Berlin"], &[(0, 1), (1, 2)]);
        let mut rng = substream(20, &["corpus-test", "covered"]);
        let masked = apply_masking(inst, 0.5, &mut rng);
        assert!(masked.mask_slots.is_empty());
    }

    #[test]
    fn mask_count_is_floor_of_ratio_times_eligible() {
        let words: Vec<String> = (0..101).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
        let inst = unmasked_instance(&refs, &[(0, 1)]); // 100 eligible positions
        let mut rng = substream(21, &["corpus-test", "floor"]);
        let masked = apply_masking(inst, 0.05, &mut rng);
        assert_eq!(masked.mask_slots.len(), 5);
        assert!(masked
            .mask_slots
            .iter()
            .all(|s| masked.tokens[s.pos] == MASK_TOKEN));
    }

    /// Intersection oracle: no mask position ever falls inside a mention
    /// span, over 10000 randomized instances.
    #[test]
    fn masks_never_intersect_mention_spans() {
        let mut rng = substream(22, &["corpus-test", "mask-outside"]);
        for _ in 0..10_000 {
            let n = rng.gen_range(4..40);
            let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            let refs: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
            // carve out one or two non-overlapping mention spans
            let m1 = rng.gen_range(0..n - 1);
            let m1e = (m1 + rng.gen_range(1..3)).min(n);
            let mut spans = vec![(m1, m1e)];
            if m1e + 1 < n {
                let m2 = rng.gen_range(m1e..n);
                let m2e = (m2 + 1).min(n);
                if m2 < m2e {
                    spans.push((m2, m2e));
                }
            }
            let inst = unmasked_instance(&refs, &spans);
            let ratio = rng.gen_range(0.0..=1.0);
            let masked = apply_masking(inst, ratio, &mut rng);
            for slot in &masked.mask_slots {
                for m in &masked.mention_labels {
                    assert!(!m.span.contains(slot.pos));
                }
            }
        }
    }

    #[test]
    fn remasking_restores_previous_tokens_first() {
        let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
        let inst = unmasked_instance(&refs, &[]);
        let mut rng = substream(23, &["corpus-test", "remask"]);
        let once = apply_masking(inst.clone(), 0.3, &mut rng);
        let twice = apply_masking(once, 0.0, &mut rng);
        assert!(twice.mask_slots.is_empty());
        assert_eq!(twice.tokens, inst.tokens);
    }

    /// Round-trip property: 1000 random instances survive write + read
    /// structurally intact.
    #[test]
    fn instance_file_roundtrip_is_lossless() {
        let mut rng = substream(24, &["corpus-test", "io-roundtrip"]);
        let mut instances = Vec::new();
        for k in 0..1000 {
            let n = rng.gen_range(1..30);
            let tokens: Vec<String> = (0..n).map(|i| format!("tok{i}")).collect();
            let mut mention_labels = Vec::new();
            if n >= 3 {
                mention_labels.push(MentionLabel {
                    span: Span::new(0, 1),
                    label: if rng.gen_bool(0.5) { Label::Kept } else { Label::Replaced },
                    orig: format!("E{}", rng.gen_range(0..50)),
                    surf: format!("E{}", rng.gen_range(0..50)),
                });
            }
            let mut inst = TrainingInstance {
                doc_id: format!("doc{}", k % 7),
                chunk_index: k % 3,
                replica: k % 10,
                tokens,
                mention_labels,
                mask_slots: vec![],
            };
            inst = apply_masking(inst, 0.2, &mut rng);
            instances.push(inst);
        }
        let f = tempfile::NamedTempFile::new().unwrap();
        write_instances(&instances, f.path()).unwrap();
        let back = read_instances(f.path()).unwrap();
        assert_eq!(back, instances);
    }

    #[test]
    fn empty_instance_list_writes_an_empty_file() {
        let f = tempfile::NamedTempFile::new().unwrap();
        write_instances(&[], f.path()).unwrap();
        assert_eq!(fs::read(f.path()).unwrap().len(), 0);
        assert!(read_instances(f.path()).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_error_names_the_line() {
        let inst = unmasked_instance(&["a", "b"], &[]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_instances(&vec![inst; 10], f.path()).unwrap();
        let mut content = fs::read_to_string(f.path()).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        let mut broken: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        broken[6] = "{\"doc_id\": broken".to_string();
        content = broken.join("\n");
        fs::write(f.path(), content).unwrap();
        match read_instances(f.path()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected Parse at line 7, got {other:?}"),
        }
    }

    #[test]
    fn document_loader_converts_char_offsets_to_token_spans() {
        let f = tempfile::NamedTempFile::new().unwrap();
        // "Paris, France" : chars 0-5 = Paris, 7-13 = France
        fs::write(
            f.path(),
            concat!(
                r#"{"doc_id":"d1","text":"Paris, France","anchors":[{"start":0,"end":5,"entity":"Q90"},{"start":7,"end":13,"entity":"Q142"}]}"#,
                "\n"
            ),
        )
        .unwrap();
        let docs = load_documents(f.path()).unwrap();
        assert_eq!(docs.len(), 1);
        let d = &docs[0];
        assert_eq!(d.tokens, vec!["Paris", ",", "France"]);
        assert_eq!(d.anchors[0].span, Span::new(0, 1));
        assert_eq!(d.anchors[1].span, Span::new(2, 3));
    }

    #[test]
    fn overlapping_anchors_are_a_parse_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(
            f.path(),
            concat!(
                r#"{"doc_id":"d1","text":"New York City","anchors":[{"start":0,"end":8,"entity":"a"},{"start":4,"end":13,"entity":"b"}]}"#,
                "\n"
            ),
        )
        .unwrap();
        match load_documents(f.path()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    /// Determinism: identical (docs, store, seed) produce byte-identical
    /// instance files.
    #[test]
    fn build_corpus_is_deterministic() {
        let store = small_store();
        let docs = vec![
            doc(
                &["Paris", "sits", "by", "Berlin", "and", "Tokyo", "always"],
                &[(0, 1, "Q90"), (3, 4, "Q64"), (5, 6, "Q1490")],
            ),
            Document {
                doc_id: "d1".into(),
                tokens: toks(&["France", "borders", "Germany", "today"]),
                anchors: vec![
                    Anchor { span: Span::new(0, 1), entity: "Q142".into() },
                    Anchor { span: Span::new(2, 3), entity: "Q183".into() },
                ],
            },
        ];
        let config = BuildConfig {
            chunk_size: 16,
            replicas: 3,
            mask_ratio: 0.2,
            seed: 99,
        };
        let (a, stats_a) = build_corpus(&docs, &store, &config);
        let (b, _) = build_corpus(&docs, &store, &config);
        assert_eq!(a, b);
        assert_eq!(stats_a.instances, a.len());
        assert_eq!(stats_a.documents, 2);

        let fa = tempfile::NamedTempFile::new().unwrap();
        let fb = tempfile::NamedTempFile::new().unwrap();
        write_instances(&a, fa.path()).unwrap();
        write_instances(&b, fb.path()).unwrap();
        assert_eq!(fs::read(fa.path()).unwrap(), fs::read(fb.path()).unwrap());
    }
}
