//! `wklm`: entity-replacement pretraining pipeline as CLI subcommands.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/schema error, 3 numerical
//! failure. Every subcommand writes a run manifest (resolved config, seed,
//! input digests) before producing outputs, so artifacts are reproducible
//! from inputs + seed. `WKLM_THREADS` caps the worker count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use wklm::corpus::{self, BuildConfig};
use wklm::kb::{self, KnowledgeStore};
use wklm::manifest::RunManifest;
use wklm::nn::load_checkpoint;
use wklm::probe::{
    self, build_benchmark, emit_report, rank_and_hits, FirstTokenScorer, MaskedAvgScorer,
    ModelCausalBackend, ModelMaskedBackend, ReplacementScorer, TableCausalBackend,
};
use wklm::train::{self, ModelSpec, TrainConfig, TrainError, TrainObjective};

#[derive(Parser)]
#[command(name = "wklm", version, about = "Weakly supervised entity-replacement pretraining toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    #[value(name = "joint")]
    Joint,
    #[value(name = "replacement_only")]
    ReplacementOnly,
    #[value(name = "mlm_only")]
    MlmOnly,
}

impl From<ObjectiveArg> for TrainObjective {
    fn from(value: ObjectiveArg) -> Self {
        match value {
            ObjectiveArg::Joint => TrainObjective::Joint,
            ObjectiveArg::ReplacementOnly => TrainObjective::ReplacementOnly,
            ObjectiveArg::MlmOnly => TrainObjective::MlmOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScorerArg {
    #[value(name = "replacement")]
    Replacement,
    #[value(name = "masked_avg")]
    MaskedAvg,
    #[value(name = "first_token")]
    FirstToken,
}

#[derive(Subcommand)]
enum Command {
    /// Index an entity file and a triple file into a store directory.
    IngestKb {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build replicated, masked training instances from anchored documents.
    BuildCorpus {
        #[arg(long)]
        docs: PathBuf,
        /// Store directory produced by ingest-kb.
        #[arg(long)]
        kb: PathBuf,
        /// Output instances file (JSON Lines).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        chunk_size: usize,
        #[arg(long, default_value_t = 10)]
        replicas: usize,
        #[arg(long, default_value_t = 0.05)]
        mask_ratio: f64,
    },
    /// Train the encoder on an instances file.
    Train {
        #[arg(long)]
        instances: PathBuf,
        /// JSON model architecture: layers, hidden, heads, ff_dim, max_len.
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ObjectiveArg::Joint)]
        objective: ObjectiveArg,
        /// Re-mask every epoch at this ratio instead of keeping file masks.
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        max_updates: u64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: u64,
    },
    /// Rank fact-completion candidates and report per-relation Hits@k.
    Probe {
        /// Store directory produced by ingest-kb.
        #[arg(long)]
        kb: PathBuf,
        /// JSON map from relation id to template pattern.
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = ScorerArg::Replacement)]
        scorer: ScorerArg,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        filtered: bool,
        /// Output report TSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        per_relation: usize,
        /// Table-driven left-to-right backend (JSON) for --scorer first_token.
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<kb::KbError> for CliError {
    fn from(e: kb::KbError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<corpus::CorpusError> for CliError {
    fn from(e: corpus::CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<probe::ProbeError> for CliError {
    fn from(e: probe::ProbeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<wklm::nn::NnError> for CliError {
    fn from(e: wklm::nn::NnError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient { .. } => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    init_thread_pool();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// `WKLM_THREADS` caps the rayon worker count.
fn init_thread_pool() {
    if let Ok(value) = std::env::var("WKLM_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::IngestKb {
            entities,
            triples,
            out,
        } => run_ingest(&entities, &triples, &out),
        Command::BuildCorpus {
            docs,
            kb,
            out,
            seed,
            chunk_size,
            replicas,
            mask_ratio,
        } => run_build_corpus(&docs, &kb, &out, seed, chunk_size, replicas, mask_ratio),
        Command::Train {
            instances,
            model_config,
            out,
            seed,
            objective,
            mask_ratio,
            max_updates,
            batch_size,
            learning_rate,
            weight_decay,
            checkpoint_every,
        } => {
            if batch_size == 0 {
                return Err(CliError::Usage("--batch-size must be at least 1".into()));
            }
            if learning_rate <= 0.0 {
                return Err(CliError::Usage("--learning-rate must be positive".into()));
            }
            if let Some(r) = mask_ratio {
                if !(0.0..=1.0).contains(&r) {
                    return Err(CliError::Usage("--mask-ratio must lie in [0, 1]".into()));
                }
            }
            let config = TrainConfig {
                learning_rate,
                batch_size,
                weight_decay,
                max_updates,
                seed,
                objective: objective.into(),
                mask_ratio,
                checkpoint_every,
            };
            run_train(&instances, &model_config, &out, &config)
        }
        Command::Probe {
            kb,
            templates,
            checkpoint,
            scorer,
            k,
            filtered,
            out,
            per_relation,
            table,
        } => {
            if k == 0 {
                return Err(CliError::Usage("--k must be at least 1".into()));
            }
            if per_relation == 0 {
                return Err(CliError::Usage("--per-relation must be at least 1".into()));
            }
            run_probe(
                &kb,
                &templates,
                &checkpoint,
                scorer,
                k,
                filtered,
                &out,
                per_relation,
                table.as_deref(),
            )
        }
    }
}

fn run_ingest(entities: &Path, triples: &Path, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new(
        "ingest-kb",
        None,
        serde_json::json!({
            "entities": entities.display().to_string(),
            "triples": triples.display().to_string(),
        }),
    );
    manifest.add_input("entities", entities)?;
    manifest.add_input("triples", triples)?;
    manifest.add_output(&out.join("entities.jsonl"));
    manifest.add_output(&out.join("triples.tsv"));
    manifest.write(&out.join("manifest.json"))?;

    let store = KnowledgeStore::load_entities(entities)?;
    let triple_list = kb::load_triples(triples)?;
    kb::validate_triples(&store, &triple_list, &triples.display().to_string())?;
    store.save_dir(&triple_list, out)?;
    println!(
        "{}",
        serde_json::json!({
            "entities": store.len(),
            "triples": triple_list.len(),
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_build_corpus(
    docs: &Path,
    kb_dir: &Path,
    out: &Path,
    seed: u64,
    chunk_size: usize,
    replicas: usize,
    mask_ratio: f64,
) -> Result<(), CliError> {
    if chunk_size < 2 {
        return Err(CliError::Usage("--chunk-size must be at least 2".into()));
    }
    if replicas < 1 {
        return Err(CliError::Usage("--replicas must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(CliError::Usage("--mask-ratio must lie in [0, 1]".into()));
    }
    let config = BuildConfig {
        chunk_size,
        replicas,
        mask_ratio,
        seed,
    };
    let stats_path = sibling(out, "stats.json");
    let mut manifest = RunManifest::new(
        "build-corpus",
        Some(seed),
        serde_json::to_value(&config).expect("config serializes"),
    );
    manifest.add_input("docs", docs)?;
    manifest.add_input("kb_entities", &kb_dir.join("entities.jsonl"))?;
    manifest.add_input("kb_triples", &kb_dir.join("triples.tsv"))?;
    manifest.add_output(out);
    manifest.add_output(&stats_path);
    manifest.write(&sibling(out, "manifest.json"))?;

    let (store, _) = KnowledgeStore::load_dir(kb_dir)?;
    let documents = corpus::load_documents(docs)?;
    let (instances, stats) = corpus::build_corpus(&documents, &store, &config);
    corpus::write_instances(&instances, out)?;
    let stats_json = serde_json::json!({
        "documents": stats.documents,
        "chunks": stats.chunks,
        "chunks_with_mentions": stats.chunks_with_mentions,
        "mentions": stats.mentions,
        "instances": stats.instances,
        "kept_mentions": stats.kept_mentions,
        "replaced_mentions": stats.replaced_mentions,
        "replaced_fraction": stats.replaced_fraction(),
        "skipped_anchors": stats.skipped_anchors,
    });
    std::fs::write(&stats_path, format!("{stats_json:#}\n"))?;
    println!("{stats_json}");
    Ok(())
}

fn run_train(
    instances: &Path,
    model_config: &Path,
    out: &Path,
    config: &TrainConfig,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let spec = ModelSpec::load(model_config)?;
    let mut manifest = RunManifest::new(
        "train",
        Some(config.seed),
        serde_json::json!({
            "model": serde_json::to_value(&spec).expect("spec serializes"),
            "train": serde_json::to_value(config).expect("config serializes"),
        }),
    );
    manifest.add_input("instances", instances)?;
    manifest.add_input("model_config", model_config)?;
    manifest.add_output(&out.join("checkpoint_final.bin"));
    manifest.add_output(&out.join("train_log.tsv"));
    manifest.write(&out.join("manifest.json"))?;

    let data = corpus::read_instances(instances)?;
    let outcome = train::train(&spec, config, data, Some(out))?;
    let last = outcome.log.last();
    println!(
        "{}",
        serde_json::json!({
            "updates": outcome.log.len(),
            "skipped_overlength": outcome.skipped_overlength,
            "heldout_size": outcome.heldout_size,
            "final_loss_repl": last.map(|r| r.loss_repl),
            "final_loss_mlm": last.map(|r| r.loss_mlm),
            "final_acc_heldout": last.map(|r| r.acc_heldout),
            "checkpoint": out.join("checkpoint_final.bin").display().to_string(),
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_probe(
    kb_dir: &Path,
    templates: &Path,
    checkpoint: &Path,
    scorer: ScorerArg,
    k: usize,
    filtered: bool,
    out: &Path,
    per_relation: usize,
    table: Option<&Path>,
) -> Result<(), CliError> {
    let queries_path = sibling(out, "queries.jsonl");
    let scorer_name = match scorer {
        ScorerArg::Replacement => "replacement",
        ScorerArg::MaskedAvg => "masked_avg",
        ScorerArg::FirstToken => "first_token",
    };
    let mut manifest = RunManifest::new(
        "probe",
        None,
        serde_json::json!({
            "scorer": scorer_name,
            "k": k,
            "filtered": filtered,
            "per_relation": per_relation,
        }),
    );
    manifest.add_input("kb_entities", &kb_dir.join("entities.jsonl"))?;
    manifest.add_input("kb_triples", &kb_dir.join("triples.tsv"))?;
    manifest.add_input("templates", templates)?;
    manifest.add_input("checkpoint", checkpoint)?;
    if let Some(t) = table {
        manifest.add_input("table", t)?;
    }
    manifest.add_output(out);
    manifest.add_output(&queries_path);
    manifest.write(&sibling(out, "manifest.json"))?;

    let (store, triples) = KnowledgeStore::load_dir(kb_dir)?;
    let template_map = probe::load_templates(templates)?;
    let model = load_checkpoint(checkpoint)?;
    let queries = build_benchmark(&triples, &template_map, &store, per_relation)?;
    probe::write_queries(&queries, &queries_path)?;

    let table_backend = match table {
        Some(path) => Some(TableCausalBackend::load(path)?),
        None => None,
    };
    let masked_backend = ModelMaskedBackend { model: &model };
    let causal_backend = ModelCausalBackend { model: &model };
    let replacement_scorer = ReplacementScorer {
        model: &model,
        store: &store,
    };
    let masked_scorer = MaskedAvgScorer {
        backend: &masked_backend,
        store: &store,
    };
    let (reports, _results) = match (scorer, &table_backend) {
        (ScorerArg::Replacement, _) => rank_and_hits(&queries, &replacement_scorer, k, filtered)?,
        (ScorerArg::MaskedAvg, _) => rank_and_hits(&queries, &masked_scorer, k, filtered)?,
        (ScorerArg::FirstToken, Some(backend)) => {
            let s = FirstTokenScorer {
                backend,
                store: &store,
            };
            rank_and_hits(&queries, &s, k, filtered)?
        }
        (ScorerArg::FirstToken, None) => {
            let s = FirstTokenScorer {
                backend: &causal_backend,
                store: &store,
            };
            rank_and_hits(&queries, &s, k, filtered)?
        }
    };
    let rendered = emit_report(&reports, out)?;
    print!("{rendered}");
    Ok(())
}

/// `<path>.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}.{suffix}", path.display()))
}
