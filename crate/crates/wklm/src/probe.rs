//! Zero-shot fact completion.
//!
//! Factual triples are rendered into cloze queries through per-relation
//! templates; candidate entities (all objects of the relation) are ranked by
//! a pluggable scorer and Hits@k is reported per relation. Ranking follows
//! the filtered convention of knowledge-base completion: when scoring one
//! answer, the query's other gold answers are removed from the candidate
//! list. Ties are broken pessimistically (the target ranks below
//! equal-scored non-targets).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{object_candidates, CandidateSet, EntityId, KnowledgeStore, RelationId, Triple};
use crate::nn::{
    encode, mlm_log_softmax, replacement_prob, DropoutSpec, Model, NnError,
};
use crate::span::Span;
use crate::tokenize::tokenize;
use crate::vocab::{MASK_TOKEN, UNK_TOKEN};

pub const SUBJ_PLACEHOLDER: &str = "[SUBJ]";
pub const OBJ_PLACEHOLDER: &str = "[OBJ]";

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("relations without a template: {}", .0.join(", "))]
    MissingTemplates(Vec<RelationId>),
    #[error("bad template for relation {relation}: {message}")]
    BadTemplate { relation: RelationId, message: String },
    #[error("query text has no {OBJ_PLACEHOLDER} placeholder: {0:?}")]
    BadQueryText(String),
    #[error("candidate surface tokenizes to nothing")]
    EmptyCandidate,
    #[error("unknown entity {0:?}")]
    UnknownEntity(EntityId),
    #[error(transparent)]
    Nn(#[from] NnError),
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
}

// ---------------------------------------------------------------------------
// Templates and queries
// ---------------------------------------------------------------------------

/// A relation's natural-language pattern, containing `[SUBJ]` and `[OBJ]`
/// exactly once each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub relation: RelationId,
    pub pattern: String,
}

impl Template {
    pub fn new(relation: &str, pattern: &str) -> Result<Template, ProbeError> {
        for placeholder in [SUBJ_PLACEHOLDER, OBJ_PLACEHOLDER] {
            if pattern.matches(placeholder).count() != 1 {
                return Err(ProbeError::BadTemplate {
                    relation: relation.to_string(),
                    message: format!("pattern must contain {placeholder} exactly once"),
                });
            }
        }
        Ok(Template {
            relation: relation.to_string(),
            pattern: pattern.to_string(),
        })
    }

    /// Render with the subject filled in; `[OBJ]` stays unfilled.
    pub fn render(&self, subject_name: &str) -> String {
        self.pattern.replace(SUBJ_PLACEHOLDER, subject_name)
    }
}

/// Load a templates file: a JSON map from relation id to pattern string.
pub fn load_templates(path: &Path) -> Result<BTreeMap<RelationId, Template>, ProbeError> {
    let text = fs::read_to_string(path).map_err(|source| ProbeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let raw: BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| ProbeError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
    raw.into_iter()
        .map(|(relation, pattern)| Ok((relation.clone(), Template::new(&relation, &pattern)?)))
        .collect()
}

/// A templated statement with the object removed: the ranking task is to
/// recover a gold object from the relation's candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClozeQuery {
    pub relation: RelationId,
    pub subject: EntityId,
    /// Rendered text with the `[OBJ]` placeholder unfilled.
    pub text: String,
    pub gold: BTreeSet<EntityId>,
    pub candidates: CandidateSet,
}

/// Build the benchmark: for each relation in the triple set, rank subjects
/// by how often they occur anywhere in the triple file, then take whole
/// subjects (one query per subject; one ranked answer per gold object) until
/// `per_relation` (subject, answer) pairs exist.
pub fn build_benchmark(
    triples: &[Triple],
    templates: &BTreeMap<RelationId, Template>,
    store: &KnowledgeStore,
    per_relation: usize,
) -> Result<Vec<ClozeQuery>, ProbeError> {
    let relations: BTreeSet<&RelationId> = triples.iter().map(|t| &t.relation).collect();
    let missing: Vec<RelationId> = relations
        .iter()
        .filter(|r| !templates.contains_key(**r))
        .map(|r| (*r).clone())
        .collect();
    if !missing.is_empty() {
        return Err(ProbeError::MissingTemplates(missing));
    }

    // entity frequency across the whole triple file, both roles
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for t in triples {
        *freq.entry(t.subject.as_str()).or_default() += 1;
        *freq.entry(t.object.as_str()).or_default() += 1;
    }

    let mut queries = Vec::new();
    for relation in relations {
        let template = &templates[relation];
        let candidates = object_candidates(triples, relation);
        let mut gold_by_subject: BTreeMap<&str, BTreeSet<EntityId>> = BTreeMap::new();
        for t in triples.iter().filter(|t| &t.relation == relation) {
            gold_by_subject
                .entry(t.subject.as_str())
                .or_default()
                .insert(t.object.clone());
        }
        let mut subjects: Vec<&str> = gold_by_subject.keys().copied().collect();
        subjects.sort_by(|a, b| freq[b].cmp(&freq[a]).then(a.cmp(b)));

        let mut pairs = 0usize;
        for subject in subjects {
            if pairs >= per_relation {
                break;
            }
            let record = store
                .get(subject)
                .ok_or_else(|| ProbeError::UnknownEntity(subject.to_string()))?;
            let gold = gold_by_subject.remove(subject).expect("subject present");
            pairs += gold.len();
            queries.push(ClozeQuery {
                relation: relation.clone(),
                subject: subject.to_string(),
                text: template.render(&record.name),
                gold,
                candidates: candidates.clone(),
            });
        }
    }
    Ok(queries)
}

/// Persist a benchmark as JSON Lines.
pub fn write_queries(queries: &[ClozeQuery], path: &Path) -> Result<(), ProbeError> {
    let display = path.display().to_string();
    let file = fs::File::create(path).map_err(|source| ProbeError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = std::io::BufWriter::new(file);
    for q in queries {
        serde_json::to_writer(&mut out, q).map_err(|e| ProbeError::Parse {
            path: display.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n").map_err(|source| ProbeError::Io {
            path: display.clone(),
            source,
        })?;
    }
    out.flush().map_err(|source| ProbeError::Io {
        path: display,
        source,
    })
}

/// Read a benchmark cache written by [`write_queries`].
pub fn read_queries(path: &Path) -> Result<Vec<ClozeQuery>, ProbeError> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| ProbeError::Io {
        path: display.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut queries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| ProbeError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let q: ClozeQuery = serde_json::from_str(&line).map_err(|e| ProbeError::Parse {
            path: display.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        queries.push(q);
    }
    Ok(queries)
}

fn split_at_obj(text: &str) -> Result<(&str, &str), ProbeError> {
    text.split_once(OBJ_PLACEHOLDER)
        .ok_or_else(|| ProbeError::BadQueryText(text.to_string()))
}

// ---------------------------------------------------------------------------
// Scoring backends
// ---------------------------------------------------------------------------

/// A masked-LM scoring backend: fills mask positions with log-probability
/// distributions over its vocabulary.
pub trait MaskedBackend {
    /// Log-probability distribution at each of `positions` (indices into
    /// `tokens`, which contain mask symbols at those positions).
    fn log_distributions(
        &self,
        tokens: &[String],
        positions: &[usize],
    ) -> Result<Vec<Vec<f64>>, ProbeError>;
    /// Index of `token` in the backend's vocabulary; unknown tokens map to
    /// the unknown symbol.
    fn token_index(&self, token: &str) -> usize;
    /// Longest unframed token sequence the backend accepts, if bounded.
    fn max_input_len(&self) -> Option<usize>;
}

/// A left-to-right scoring backend: predicts the next token after a prefix.
pub trait CausalBackend {
    fn next_log_distribution(&self, prefix: &[String]) -> Result<Vec<f64>, ProbeError>;
    fn token_index(&self, token: &str) -> usize;
    fn max_input_len(&self) -> Option<usize>;
}

/// The trained model's MLM head as a masked-LM backend.
pub struct ModelMaskedBackend<'a> {
    pub model: &'a Model,
}

impl MaskedBackend for ModelMaskedBackend<'_> {
    fn log_distributions(
        &self,
        tokens: &[String],
        positions: &[usize],
    ) -> Result<Vec<Vec<f64>>, ProbeError> {
        let ids = self.model.vocab.encode_framed(tokens);
        let valid_len = ids.len();
        let (hidden, _) = encode(
            &self.model.params,
            &self.model.config,
            &ids,
            valid_len,
            DropoutSpec::Inference,
        )?;
        Ok(positions
            .iter()
            .map(|&p| {
                mlm_log_softmax(&self.model.params, &hidden, p + 1)
                    .into_iter()
                    .collect()
            })
            .collect())
    }

    fn token_index(&self, token: &str) -> usize {
        self.model.vocab.id(token)
    }

    fn max_input_len(&self) -> Option<usize> {
        Some(self.model.config.max_len.saturating_sub(2))
    }
}

/// The trained model reused as a left-to-right backend: the prefix is
/// followed by a single mask symbol and the MLM head predicts it.
pub struct ModelCausalBackend<'a> {
    pub model: &'a Model,
}

impl CausalBackend for ModelCausalBackend<'_> {
    fn next_log_distribution(&self, prefix: &[String]) -> Result<Vec<f64>, ProbeError> {
        let mut tokens = prefix.to_vec();
        tokens.push(MASK_TOKEN.to_string());
        let ids = self.model.vocab.encode_framed(&tokens);
        let valid_len = ids.len();
        let (hidden, _) = encode(
            &self.model.params,
            &self.model.config,
            &ids,
            valid_len,
            DropoutSpec::Inference,
        )?;
        Ok(mlm_log_softmax(&self.model.params, &hidden, prefix.len() + 1)
            .into_iter()
            .collect())
    }

    fn token_index(&self, token: &str) -> usize {
        self.model.vocab.id(token)
    }

    fn max_input_len(&self) -> Option<usize> {
        Some(self.model.config.max_len.saturating_sub(3))
    }
}

fn table_token_index(vocab: &[String], token: &str) -> usize {
    vocab
        .iter()
        .position(|t| t == token)
        .or_else(|| vocab.iter().position(|t| t == UNK_TOKEN))
        .unwrap_or(0)
}

/// Table-driven masked backend: a fixed log-distribution per mask slot
/// index, independent of the surrounding tokens.
pub struct TableMaskedBackend {
    pub vocab: Vec<String>,
    pub log_dists: Vec<Vec<f64>>,
}

impl MaskedBackend for TableMaskedBackend {
    fn log_distributions(
        &self,
        _tokens: &[String],
        positions: &[usize],
    ) -> Result<Vec<Vec<f64>>, ProbeError> {
        Ok((0..positions.len())
            .map(|j| self.log_dists[j.min(self.log_dists.len() - 1)].clone())
            .collect())
    }

    fn token_index(&self, token: &str) -> usize {
        table_token_index(&self.vocab, token)
    }

    fn max_input_len(&self) -> Option<usize> {
        None
    }
}

/// Table-driven left-to-right backend keyed on the joined prefix text.
#[derive(Debug, Serialize, Deserialize)]
pub struct TableCausalBackend {
    pub vocab: Vec<String>,
    /// Prefix text (tokens joined with single spaces) -> log distribution.
    pub entries: BTreeMap<String, Vec<f64>>,
    /// Fallback distribution for unlisted prefixes.
    pub default: Option<Vec<f64>>,
}

impl TableCausalBackend {
    /// Load from JSON holding probabilities:
    /// `{"vocab": [...], "entries": {"<prefix>": [p...]}, "default": [p...]}`.
    pub fn load(path: &Path) -> Result<TableCausalBackend, ProbeError> {
        #[derive(Deserialize)]
        struct Raw {
            vocab: Vec<String>,
            #[serde(default)]
            entries: BTreeMap<String, Vec<f64>>,
            #[serde(default)]
            default: Option<Vec<f64>>,
        }
        let text = fs::read_to_string(path).map_err(|source| ProbeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let raw: Raw = serde_json::from_str(&text).map_err(|e| ProbeError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        let to_log = |probs: Vec<f64>| probs.into_iter().map(|p| p.ln()).collect::<Vec<f64>>();
        Ok(TableCausalBackend {
            vocab: raw.vocab,
            entries: raw.entries.into_iter().map(|(k, v)| (k, to_log(v))).collect(),
            default: raw.default.map(to_log),
        })
    }
}

impl CausalBackend for TableCausalBackend {
    fn next_log_distribution(&self, prefix: &[String]) -> Result<Vec<f64>, ProbeError> {
        let key = prefix.join(" ");
        if let Some(dist) = self.entries.get(&key) {
            return Ok(dist.clone());
        }
        if let Some(dist) = &self.default {
            return Ok(dist.clone());
        }
        Err(ProbeError::BadQueryText(format!(
            "no table entry for prefix {key:?}"
        )))
    }

    fn token_index(&self, token: &str) -> usize {
        table_token_index(&self.vocab, token)
    }

    fn max_input_len(&self) -> Option<usize> {
        None
    }
}

// ---------------------------------------------------------------------------
// Scoring operations
// ---------------------------------------------------------------------------

/// Masked-average score: the query is rendered with one mask per candidate
/// token and the score is the mean log-probability of the candidate's
/// tokens at their mask positions. Overlength inputs score `-inf`.
pub fn score_masked_avg<B: MaskedBackend + ?Sized>(
    backend: &B,
    query: &ClozeQuery,
    candidate_surface: &str,
) -> Result<f64, ProbeError> {
    let cand_tokens = tokenize(candidate_surface);
    if cand_tokens.is_empty() {
        return Err(ProbeError::EmptyCandidate);
    }
    let (pre, post) = split_at_obj(&query.text)?;
    let mut tokens = tokenize(pre);
    let mask_start = tokens.len();
    for _ in 0..cand_tokens.len() {
        tokens.push(MASK_TOKEN.to_string());
    }
    tokens.extend(tokenize(post));
    if let Some(max_len) = backend.max_input_len() {
        if tokens.len() > max_len {
            return Ok(f64::NEG_INFINITY);
        }
    }
    let positions: Vec<usize> = (mask_start..mask_start + cand_tokens.len()).collect();
    let dists = backend.log_distributions(&tokens, &positions)?;
    let mut total = 0.0;
    for (tok, dist) in cand_tokens.iter().zip(&dists) {
        total += dist[backend.token_index(tok)];
    }
    Ok(total / cand_tokens.len() as f64)
}

/// First-token score: the query is truncated before `[OBJ]` and the score is
/// the log-probability of the candidate's first token continuing the prefix.
pub fn score_first_token<B: CausalBackend + ?Sized>(
    backend: &B,
    query: &ClozeQuery,
    candidate_surface: &str,
) -> Result<f64, ProbeError> {
    let cand_tokens = tokenize(candidate_surface);
    let first = cand_tokens.first().ok_or(ProbeError::EmptyCandidate)?;
    let (pre, _) = split_at_obj(&query.text)?;
    let prefix = tokenize(pre);
    if let Some(max_len) = backend.max_input_len() {
        if prefix.len() > max_len {
            return Ok(f64::NEG_INFINITY);
        }
    }
    let dist = backend.next_log_distribution(&prefix)?;
    Ok(dist[backend.token_index(first)])
}

/// Replacement-probability score: the query is rendered with the candidate
/// surface in the `[OBJ]` slot, that span is marked as the mention, and the
/// boundary-word head's `P(e|C)` is the score. Overlength inputs score
/// `-inf`.
pub fn score_replacement(
    model: &Model,
    query: &ClozeQuery,
    candidate_surface: &str,
) -> Result<f64, ProbeError> {
    let cand_tokens = tokenize(candidate_surface);
    if cand_tokens.is_empty() {
        return Err(ProbeError::EmptyCandidate);
    }
    let (pre, post) = split_at_obj(&query.text)?;
    let mut tokens = tokenize(pre);
    let span = Span::new(tokens.len(), tokens.len() + cand_tokens.len());
    tokens.extend(cand_tokens);
    tokens.extend(tokenize(post));
    if tokens.len() + 2 > model.config.max_len {
        return Ok(f64::NEG_INFINITY);
    }
    let ids = model.vocab.encode_framed(&tokens);
    let valid_len = ids.len();
    let (hidden, _) = encode(
        &model.params,
        &model.config,
        &ids,
        valid_len,
        DropoutSpec::Inference,
    )?;
    Ok(replacement_prob(&model.params, &hidden, span.shifted(1))?)
}

/// A pluggable per-candidate scorer used by [`rank_and_hits`].
pub trait QueryScorer {
    fn score(&self, query: &ClozeQuery, candidate: &EntityId) -> Result<f64, ProbeError>;
}

fn surface_of<'s>(store: &'s KnowledgeStore, id: &EntityId) -> Result<&'s str, ProbeError> {
    store
        .get(id)
        .map(|r| r.name.as_str())
        .ok_or_else(|| ProbeError::UnknownEntity(id.clone()))
}

pub struct ReplacementScorer<'a> {
    pub model: &'a Model,
    pub store: &'a KnowledgeStore,
}

impl QueryScorer for ReplacementScorer<'_> {
    fn score(&self, query: &ClozeQuery, candidate: &EntityId) -> Result<f64, ProbeError> {
        score_replacement(self.model, query, surface_of(self.store, candidate)?)
    }
}

pub struct MaskedAvgScorer<'a, B: MaskedBackend + ?Sized> {
    pub backend: &'a B,
    pub store: &'a KnowledgeStore,
}

impl<B: MaskedBackend + ?Sized> QueryScorer for MaskedAvgScorer<'_, B> {
    fn score(&self, query: &ClozeQuery, candidate: &EntityId) -> Result<f64, ProbeError> {
        score_masked_avg(self.backend, query, surface_of(self.store, candidate)?)
    }
}

pub struct FirstTokenScorer<'a, B: CausalBackend + ?Sized> {
    pub backend: &'a B,
    pub store: &'a KnowledgeStore,
}

impl<B: CausalBackend + ?Sized> QueryScorer for FirstTokenScorer<'_, B> {
    fn score(&self, query: &ClozeQuery, candidate: &EntityId) -> Result<f64, ProbeError> {
        score_first_token(self.backend, query, surface_of(self.store, candidate)?)
    }
}

// ---------------------------------------------------------------------------
// Ranking and reports
// ---------------------------------------------------------------------------

/// Ranking outcome for one (query, target answer) pair.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub relation: RelationId,
    pub subject: EntityId,
    pub target: EntityId,
    /// Scored candidates after filtering, sorted by descending score with
    /// the target below equal-scored non-targets.
    pub ranked: Vec<(EntityId, f64)>,
    /// 1-based pessimistic rank of the target.
    pub rank: usize,
    pub hit: bool,
}

/// Per-relation report row.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationReport {
    pub relation: RelationId,
    pub n_candidates: usize,
    pub avg_answers: f64,
    pub hits_at_k: f64,
}

/// Mean of `values`; zero when empty.
pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Score every query's candidate set once, derive the pessimistic rank of
/// each gold answer (filtered or raw), and aggregate Hits@k per relation.
pub fn rank_and_hits(
    queries: &[ClozeQuery],
    scorer: &dyn QueryScorer,
    k: usize,
    filtered: bool,
) -> Result<(Vec<RelationReport>, Vec<RankingResult>), ProbeError> {
    let mut results = Vec::new();
    struct RelAgg {
        n_candidates: usize,
        answer_counts: Vec<f64>,
        hits: usize,
        pairs: usize,
    }
    let mut per_relation: BTreeMap<RelationId, RelAgg> = BTreeMap::new();

    for query in queries {
        let scores: Vec<(EntityId, f64)> = query
            .candidates
            .ids
            .iter()
            .map(|c| Ok((c.clone(), scorer.score(query, c)?)))
            .collect::<Result<_, ProbeError>>()?;

        let agg = per_relation
            .entry(query.relation.clone())
            .or_insert_with(|| RelAgg {
                n_candidates: query.candidates.len(),
                answer_counts: Vec::new(),
                hits: 0,
                pairs: 0,
            });
        agg.answer_counts.push(query.gold.len() as f64);

        for target in &query.gold {
            let mut ranked: Vec<(EntityId, f64)> = scores
                .iter()
                .filter(|(id, _)| {
                    id == target || !(filtered && query.gold.contains(id))
                })
                .cloned()
                .collect();
            // descending score; equal-scored non-targets ahead of the target;
            // id order for full determinism
            ranked.sort_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then_with(|| (a.0 == *target).cmp(&(b.0 == *target)))
                    .then_with(|| a.0.cmp(&b.0))
            });
            let rank = ranked
                .iter()
                .position(|(id, _)| id == target)
                .expect("gold answer is a candidate")
                + 1;
            let hit = rank <= k;
            agg.hits += hit as usize;
            agg.pairs += 1;
            results.push(RankingResult {
                relation: query.relation.clone(),
                subject: query.subject.clone(),
                target: target.clone(),
                ranked,
                rank,
                hit,
            });
        }
    }

    let reports = per_relation
        .into_iter()
        .map(|(relation, agg)| RelationReport {
            relation,
            n_candidates: agg.n_candidates,
            avg_answers: macro_average(&agg.answer_counts),
            hits_at_k: if agg.pairs == 0 {
                0.0
            } else {
                agg.hits as f64 / agg.pairs as f64
            },
        })
        .collect();
    Ok((reports, results))
}

/// Write the report as TSV (lossless float formatting) and return a rendered
/// table for human eyes. The final row is the macro-average.
pub fn emit_report(reports: &[RelationReport], path: &Path) -> Result<String, ProbeError> {
    let mut rows: Vec<RelationReport> = reports.to_vec();
    rows.sort_by(|a, b| a.relation.cmp(&b.relation));

    let avg = RelationReport {
        relation: "average".to_string(),
        n_candidates: 0,
        avg_answers: macro_average(&rows.iter().map(|r| r.avg_answers).collect::<Vec<_>>()),
        hits_at_k: macro_average(&rows.iter().map(|r| r.hits_at_k).collect::<Vec<_>>()),
    };
    let mean_candidates =
        macro_average(&rows.iter().map(|r| r.n_candidates as f64).collect::<Vec<_>>());

    let mut tsv = String::from("relation\tn_candidates\tavg_answers\thits_at_k\n");
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.relation, r.n_candidates, r.avg_answers, r.hits_at_k
        ));
    }
    tsv.push_str(&format!(
        "average\t{}\t{}\t{}\n",
        mean_candidates, avg.avg_answers, avg.hits_at_k
    ));
    fs::write(path, &tsv).map_err(|source| ProbeError::Io {
        path: path.display().to_string(),
        source,
    })?;

    let mut rendered = format!(
        "{:<24} {:>12} {:>12} {:>10}\n",
        "relation", "n_candidates", "avg_answers", "hits_at_k"
    );
    for r in rows.iter() {
        rendered.push_str(&format!(
            "{:<24} {:>12} {:>12.4} {:>10.4}\n",
            r.relation, r.n_candidates, r.avg_answers, r.hits_at_k
        ));
    }
    rendered.push_str(&format!(
        "{:<24} {:>12.1} {:>12.4} {:>10.4}\n",
        "average", mean_candidates, avg.avg_answers, avg.hits_at_k
    ));
    Ok(rendered)
}

/// Parse a report TSV back into rows plus the average row's hits value.
pub fn read_report(path: &Path) -> Result<(Vec<RelationReport>, f64), ProbeError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| ProbeError::Io {
        path: display.clone(),
        source,
    })?;
    let mut rows = Vec::new();
    let mut average = 0.0;
    for (idx, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(ProbeError::Parse {
                path: display.clone(),
                line: idx + 1,
                message: "expected 4 columns".into(),
            });
        }
        let parse_f = |s: &str| -> Result<f64, ProbeError> {
            s.parse().map_err(|_| ProbeError::Parse {
                path: display.clone(),
                line: idx + 1,
                message: format!("bad float {s:?}"),
            })
        };
        if fields[0] == "average" {
            average = parse_f(fields[3])?;
        } else {
            rows.push(RelationReport {
                relation: fields[0].to_string(),
                n_candidates: fields[1].parse().map_err(|_| ProbeError::Parse {
                    path: display.clone(),
                    line: idx + 1,
                    message: format!("bad count {:?}", fields[1]),
                })?,
                avg_answers: parse_f(fields[2])?,
                hits_at_k: parse_f(fields[3])?,
            });
        }
    }
    Ok((rows, average))
}
