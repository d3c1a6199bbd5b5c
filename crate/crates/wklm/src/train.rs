//! Optimization loop over training instances.
//!
//! One thread owns the parameters and optimizer state. Batches are bucketed
//! by length and padded; batch composition and order come from a seeded
//! permutation each epoch, so `(seed, data, config)` fixes the entire run.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{apply_masking, CorpusError, Label, TrainingInstance};
use crate::nn::{
    backward_instance, forward_instance, replacement_loss, sample_dropout_mask, save_checkpoint,
    DropoutSpec, EncodedMention, InstanceTask, Model, ModelConfig, ModelParams, NnError,
    ParamLayout,
};
use crate::rng::substream;
use crate::vocab::Vocab;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at update {update} (replacement {loss_repl}, mlm {loss_mlm})")]
    NonFiniteLoss {
        update: u64,
        loss_repl: f64,
        loss_mlm: f64,
    },
    #[error("non-finite gradient in tensor {tensor} at update {update}")]
    NonFiniteGradient { update: u64, tensor: String },
    #[error("no trainable instances (all {skipped} skipped as overlength)")]
    NoInstances { skipped: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which objectives contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainObjective {
    Joint,
    ReplacementOnly,
    MlmOnly,
}

impl TrainObjective {
    /// (replacement weight, mlm weight)
    pub fn weights(&self) -> (f64, f64) {
        match self {
            TrainObjective::Joint => (1.0, 1.0),
            TrainObjective::ReplacementOnly => (1.0, 0.0),
            TrainObjective::MlmOnly => (0.0, 1.0),
        }
    }
}

/// Model architecture as written in a model-config file; vocabulary size and
/// special-token bindings are resolved from the training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    #[serde(default = "default_final_dropout")]
    pub final_dropout: f64,
}

fn default_final_dropout() -> f64 {
    0.05
}

impl ModelSpec {
    pub fn load(path: &Path) -> Result<ModelSpec, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| {
            TrainError::Corpus(CorpusError::Parse {
                path: path.display().to_string(),
                line: 0,
                message: e.to_string(),
            })
        })
    }

    fn resolve(&self, vocab_size: usize) -> ModelConfig {
        let mut config = ModelConfig::new(
            self.layers,
            self.hidden,
            self.heads,
            self.ff_dim,
            vocab_size,
            self.max_len,
        );
        config.final_dropout = self.final_dropout;
        config
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_updates: u64,
    pub seed: u64,
    pub objective: TrainObjective,
    /// `None` keeps the masks recorded in the instance file; `Some(r)`
    /// discards them and re-masks with ratio `r` each epoch with fresh
    /// randomness.
    pub mask_ratio: Option<f64>,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 16,
            weight_decay: 0.01,
            max_updates: 1000,
            seed: 0,
            objective: TrainObjective::Joint,
            mask_ratio: None,
            checkpoint_every: 1000,
        }
    }
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update followed by multiplicative decay
/// `(1 - lr * weight_decay)` on decay-eligible parameters.
///
/// Returns the index of the first non-finite gradient, if any, without
/// touching the parameters.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
    decay: &[bool],
) -> Result<(), usize> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    assert_eq!(params.len(), decay.len());
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(bad);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        if decay[i] {
            params[i] *= 1.0 - hyper.learning_rate * hyper.weight_decay;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Instance preparation
// ---------------------------------------------------------------------------

/// Convert an instance into encoder coordinates: framed ids, bos-shifted
/// mention spans, and `(position, target id)` mask slots.
pub fn encode_instance(instance: &TrainingInstance, vocab: &Vocab) -> InstanceTask {
    let ids = vocab.encode_framed(&instance.tokens);
    let valid_len = ids.len();
    let mentions = instance
        .mention_labels
        .iter()
        .map(|m| EncodedMention {
            span: m.span.shifted(1),
            label: m.label,
        })
        .collect();
    let masks = instance
        .mask_slots
        .iter()
        .map(|s| (s.pos + 1, vocab.id(&s.orig)))
        .collect();
    InstanceTask {
        ids,
        valid_len,
        mentions,
        masks,
    }
}

/// Mention-level replacement-detection accuracy in inference mode:
/// `P(e|C) >= 0.5` predicts an original mention. Returns 0 when the tasks
/// carry no mentions.
pub fn replacement_accuracy(
    params: &ModelParams,
    config: &ModelConfig,
    tasks: &[InstanceTask],
) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for task in tasks {
        if task.mentions.is_empty() {
            continue;
        }
        let fwd = forward_instance(params, config, task, DropoutSpec::Inference)?;
        for (m, &p) in task.mentions.iter().zip(&fwd.mention_probs) {
            let predicted = if p >= 0.5 { Label::Kept } else { Label::Replaced };
            if predicted == m.label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub update: u64,
    pub loss_repl: f64,
    pub loss_mlm: f64,
    pub acc_heldout: f64,
    pub seconds: f64,
}

/// Write the per-update log as TSV.
pub fn write_train_log(records: &[TrainLogRecord], path: &Path) -> Result<(), TrainError> {
    let mut out = String::from("update\tloss_repl\tloss_mlm\tacc_heldout\tseconds\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.4}\t{:.3}\n",
            r.update, r.loss_repl, r.loss_mlm, r.acc_heldout, r.seconds
        ));
    }
    fs::write(path, out).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<TrainLogRecord>,
    pub skipped_overlength: usize,
    pub heldout_size: usize,
}

/// How many held-out instances feed the per-update accuracy probe.
const HELDOUT_EVAL_CAP: usize = 32;

/// Train a model over `instances`. Checkpoints and the log are written to
/// `out_dir` when given; the final model is always returned.
pub fn train(
    spec: &ModelSpec,
    train_config: &TrainConfig,
    instances: Vec<TrainingInstance>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    // drop instances that cannot be framed within max_len
    let total = instances.len();
    let mut kept: Vec<TrainingInstance> = instances
        .into_iter()
        .filter(|i| i.tokens.len() + 2 <= spec.max_len)
        .collect();
    let skipped_overlength = total - kept.len();
    if kept.is_empty() {
        return Err(TrainError::NoInstances {
            skipped: skipped_overlength,
        });
    }

    // strip recorded masks when a re-masking ratio is requested
    if train_config.mask_ratio.is_some() {
        kept = kept
            .into_iter()
            .map(|mut inst| {
                for slot in inst.mask_slots.drain(..) {
                    inst.tokens[slot.pos] = slot.orig;
                }
                inst
            })
            .collect();
    }

    // vocabulary over surface tokens and masked-out originals
    let vocab = Vocab::build(
        kept.iter()
            .flat_map(|i| {
                i.tokens
                    .iter()
                    .map(|t| t.as_str())
                    .chain(i.mask_slots.iter().map(|s| s.orig.as_str()))
            }),
    );
    let config = spec.resolve(vocab.len());
    config.validate()?;
    let layout = ParamLayout::new(&config);
    let decay_mask = layout.decay_mask();

    // held-out slice for the accuracy column
    let n = kept.len();
    let (train_idx, heldout_idx): (Vec<usize>, Vec<usize>) = if n >= 10 {
        (0..n).partition(|i| i % 10 != 0)
    } else {
        ((0..n).collect(), (0..n).collect())
    };
    let heldout_tasks: Vec<InstanceTask> = heldout_idx
        .iter()
        .take(HELDOUT_EVAL_CAP)
        .map(|&i| encode_instance(&kept[i], &vocab))
        .collect();

    let mut params = ModelParams::init(
        &config,
        &mut substream(train_config.seed, &["train", "init"]),
    );
    let mut flat = params.to_flat();
    let mut adam = AdamState::new(flat.len());
    let hyper = AdamHyper {
        learning_rate: train_config.learning_rate,
        weight_decay: train_config.weight_decay,
        ..AdamHyper::default()
    };
    let (w_repl, w_mlm) = train_config.objective.weights();

    let start = Instant::now();
    let mut log: Vec<TrainLogRecord> = Vec::new();
    let mut update: u64 = 0;
    let mut epoch: u64 = 0;

    'epochs: while update < train_config.max_updates {
        // optional per-epoch re-masking with fresh randomness
        let epoch_tag = epoch.to_string();
        let epoch_instances: Vec<TrainingInstance> = match train_config.mask_ratio {
            Some(ratio) => {
                let mut mask_rng =
                    substream(train_config.seed, &["train", "mask", &epoch_tag]);
                train_idx
                    .iter()
                    .map(|&i| apply_masking(kept[i].clone(), ratio, &mut mask_rng))
                    .collect()
            }
            None => train_idx.iter().map(|&i| kept[i].clone()).collect(),
        };
        let tasks: Vec<InstanceTask> = epoch_instances
            .iter()
            .map(|inst| encode_instance(inst, &vocab))
            .collect();

        // seeded shuffle, stable length bucketing, shuffled batch order
        let mut shuffle_rng = substream(train_config.seed, &["train", "shuffle", &epoch_tag]);
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        order.shuffle(&mut shuffle_rng);
        order.sort_by_key(|&i| tasks[i].ids.len());
        let mut batches: Vec<Vec<usize>> = order
            .chunks(train_config.batch_size.max(1))
            .map(|c| c.to_vec())
            .collect();
        batches.shuffle(&mut shuffle_rng);

        for batch in batches {
            if update >= train_config.max_updates {
                break 'epochs;
            }
            update += 1;
            let update_tag = update.to_string();
            let mut dropout_rng =
                substream(train_config.seed, &["train", "dropout", &update_tag]);

            let batch_max = batch.iter().map(|&i| tasks[i].ids.len()).max().unwrap();
            let mut forwards = Vec::with_capacity(batch.len());
            let mut padded_tasks = Vec::with_capacity(batch.len());
            let mut n_mentions = 0usize;
            let mut n_masks = 0usize;
            for &i in &batch {
                let mut task = tasks[i].clone();
                task.ids.resize(batch_max, config.pad_token);
                let mask = sample_dropout_mask(
                    batch_max,
                    config.hidden,
                    config.final_dropout,
                    &mut dropout_rng,
                );
                let fwd = forward_instance(&params, &config, &task, DropoutSpec::Train(&mask))?;
                n_mentions += task.mentions.len();
                n_masks += task.masks.len();
                forwards.push(fwd);
                padded_tasks.push(task);
            }

            // batch losses (means over all mentions / mask slots in the batch)
            let mut loss_repl = 0.0;
            if w_repl > 0.0 && n_mentions > 0 {
                let mut probs = Vec::with_capacity(n_mentions);
                let mut labels = Vec::with_capacity(n_mentions);
                for (task, fwd) in padded_tasks.iter().zip(&forwards) {
                    for (m, &p) in task.mentions.iter().zip(&fwd.mention_probs) {
                        probs.push(p);
                        labels.push(m.label);
                    }
                }
                loss_repl = replacement_loss(&probs, &labels);
            }
            let mut loss_mlm = 0.0;
            if w_mlm > 0.0 && n_masks > 0 {
                let mut total = 0.0;
                for (task, fwd) in padded_tasks.iter().zip(&forwards) {
                    for (&(_, target), log_probs) in task.masks.iter().zip(&fwd.mask_log_probs) {
                        total -= log_probs[target];
                    }
                }
                loss_mlm = total / n_masks as f64;
            }
            if !loss_repl.is_finite() || !loss_mlm.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    update,
                    loss_repl,
                    loss_mlm,
                });
            }

            // gradients, accumulated in batch order
            let mention_coef = if n_mentions > 0 { w_repl / n_mentions as f64 } else { 0.0 };
            let mask_coef = if n_masks > 0 { w_mlm / n_masks as f64 } else { 0.0 };
            let mut grads = ModelParams::zeros(&config);
            for (task, fwd) in padded_tasks.iter().zip(&forwards) {
                backward_instance(&params, &config, task, fwd, mention_coef, mask_coef, &mut grads)?;
            }
            let flat_grads = grads.to_flat();
            if let Err(bad) = adam_step(&mut flat, &flat_grads, &mut adam, &hyper, &decay_mask) {
                return Err(TrainError::NonFiniteGradient {
                    update,
                    tensor: layout.tensor_at(bad).name.clone(),
                });
            }
            params.copy_from_flat(&flat);

            let acc = replacement_accuracy(&params, &config, &heldout_tasks)?;
            log.push(TrainLogRecord {
                update,
                loss_repl,
                loss_mlm,
                acc_heldout: acc,
                seconds: start.elapsed().as_secs_f64(),
            });

            if let Some(dir) = out_dir {
                if train_config.checkpoint_every > 0 && update % train_config.checkpoint_every == 0
                {
                    let path = dir.join(format!("checkpoint_{update:07}.bin"));
                    save_checkpoint(&path, &config, &vocab, &params)?;
                }
            }
        }
        epoch += 1;
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("checkpoint_final.bin"), &config, &vocab, &params)?;
        write_train_log(&log, &dir.join("train_log.tsv"))?;
    }

    Ok(TrainOutcome {
        model: Model {
            config,
            vocab,
            params,
        },
        log,
        skipped_overlength,
        heldout_size: heldout_idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{MaskSlot, MentionLabel};
    use crate::span::Span;

    #[test]
    fn adam_single_scalar_hand_step() {
        // g=1 at step 1, lr=0.1, no decay: theta <- theta - 0.1 * 1/(1+1e-8)
        let mut params = vec![1.0];
        let mut state = AdamState::new(1);
        let hyper = AdamHyper {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        adam_step(&mut params, &[1.0], &mut state, &hyper, &[true]).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((params[0] - expected).abs() < 1e-15, "{} vs {expected}", params[0]);
    }

    #[test]
    fn zero_gradient_and_zero_decay_leave_params_unchanged() {
        let mut params = vec![0.5, -2.0, 3.25];
        let before = params.clone();
        let mut state = AdamState::new(3);
        let hyper = AdamHyper {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        for _ in 0..5 {
            adam_step(&mut params, &[0.0; 3], &mut state, &hyper, &[true, true, false]).unwrap();
        }
        assert_eq!(params, before);
    }

    /// Optimizer-degeneration oracle: with beta1 = beta2 = 0 the update is
    /// the normalized-gradient recurrence
    /// `theta <- (theta - lr * g / (|g| + eps)) * (1 - lr * wd)`,
    /// which a hand-rolled loop reproduces to 1e-12.
    #[test]
    fn zero_betas_reduce_to_manual_sgd() {
        let hyper = AdamHyper {
            learning_rate: 0.05,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 1e-8,
            weight_decay: 0.01,
        };
        let grads_per_step = [
            vec![0.3, -1.5, 2.0],
            vec![-0.7, 0.2, -0.1],
            vec![1.1, 1.1, -3.0],
        ];
        let mut params = vec![1.0, -2.0, 0.5];
        let mut manual = params.clone();
        let mut state = AdamState::new(3);
        let decay = [true, false, true];
        for grads in &grads_per_step {
            adam_step(&mut params, grads, &mut state, &hyper, &decay).unwrap();
            for i in 0..3 {
                let g = grads[i];
                manual[i] -= hyper.learning_rate * g / (g.abs() + hyper.epsilon);
                if decay[i] {
                    manual[i] *= 1.0 - hyper.learning_rate * hyper.weight_decay;
                }
            }
        }
        for i in 0..3 {
            assert!(
                (params[i] - manual[i]).abs() < 1e-12,
                "param {i}: {} vs {}",
                params[i],
                manual[i]
            );
        }
    }

    #[test]
    fn non_finite_gradient_is_reported_without_updating() {
        let mut params = vec![1.0, 2.0];
        let before = params.clone();
        let mut state = AdamState::new(2);
        let hyper = AdamHyper::default();
        let err = adam_step(&mut params, &[0.1, f64::NAN], &mut state, &hyper, &[true, true]);
        assert_eq!(err, Err(1));
        assert_eq!(params, before);
        assert_eq!(state.step, 0);
    }

    /// Synthetic instances where the mention surface token carries the
    /// label: kept mentions read "good", replaced ones "bad".
    fn toy_instances(n: usize) -> Vec<TrainingInstance> {
        (0..n)
            .map(|i| {
                let replaced = i % 2 == 0;
                let word = if replaced { "bad" } else { "good" };
                TrainingInstance {
                    doc_id: format!("d{i}"),
                    chunk_index: 0,
                    replica: 0,
                    tokens: vec![
                        "the".into(),
                        word.into(),
                        "thing".into(),
                        "[MASK]".into(),
                        "here".into(),
                    ],
                    mention_labels: vec![MentionLabel {
                        span: Span::new(1, 2),
                        label: if replaced { Label::Replaced } else { Label::Kept },
                        orig: "E0".into(),
                        surf: if replaced { "E1".into() } else { "E0".into() },
                    }],
                    mask_slots: vec![MaskSlot {
                        pos: 3,
                        orig: "sits".into(),
                    }],
                }
            })
            .collect()
    }

    fn toy_spec() -> ModelSpec {
        ModelSpec {
            layers: 1,
            hidden: 16,
            heads: 2,
            ff_dim: 32,
            max_len: 16,
            final_dropout: 0.05,
        }
    }

    #[test]
    fn replacement_only_logs_zero_mlm_loss() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            max_updates: 6,
            seed: 3,
            objective: TrainObjective::ReplacementOnly,
            ..TrainConfig::default()
        };
        let outcome = train(&toy_spec(), &cfg, toy_instances(12), None).unwrap();
        assert_eq!(outcome.log.len(), 6);
        assert!(outcome.log.iter().all(|r| r.loss_mlm == 0.0));
        assert!(outcome.log.iter().all(|r| r.loss_repl > 0.0));
    }

    #[test]
    fn mlm_only_logs_zero_replacement_loss() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            max_updates: 4,
            seed: 3,
            objective: TrainObjective::MlmOnly,
            ..TrainConfig::default()
        };
        let outcome = train(&toy_spec(), &cfg, toy_instances(12), None).unwrap();
        assert!(outcome.log.iter().all(|r| r.loss_repl == 0.0));
        assert!(outcome.log.iter().all(|r| r.loss_mlm > 0.0));
    }

    /// Replay determinism: the entire log (minus wall-clock) and the final
    /// parameters are fixed by (seed, data, config).
    #[test]
    fn identical_seeds_replay_identically() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            max_updates: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&toy_spec(), &cfg, toy_instances(12), None).unwrap();
        let b = train(&toy_spec(), &cfg, toy_instances(12), None).unwrap();
        assert_eq!(a.log.len(), b.log.len());
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.update, rb.update);
            assert_eq!(ra.loss_repl, rb.loss_repl);
            assert_eq!(ra.loss_mlm, rb.loss_mlm);
            assert_eq!(ra.acc_heldout, rb.acc_heldout);
        }
        assert_eq!(a.model.params, b.model.params);

        let c = train(
            &toy_spec(),
            &TrainConfig { seed: 12, ..cfg },
            toy_instances(12),
            None,
        )
        .unwrap();
        assert_ne!(a.model.params, c.model.params);
    }

    /// Full-batch loss is non-increasing over the first 50 steps, allowing
    /// at most 5 violations above 1e-6. Dropout is disabled so the loss on
    /// the fixed batch is a deterministic function of the parameters.
    #[test]
    fn full_batch_loss_is_monotone_up_to_tolerance() {
        let instances = toy_instances(12);
        let spec = ModelSpec {
            final_dropout: 0.0,
            ..toy_spec()
        };
        let cfg = TrainConfig {
            learning_rate: 3e-4,
            batch_size: 12, // full batch
            max_updates: 50,
            seed: 21,
            mask_ratio: Some(0.0), // keep the data identical across epochs
            ..TrainConfig::default()
        };
        let outcome = train(&spec, &cfg, instances, None).unwrap();
        assert_eq!(outcome.log.len(), 50);
        let mut violations = 0;
        for w in outcome.log.windows(2) {
            let prev = w[0].loss_repl + w[0].loss_mlm;
            let next = w[1].loss_repl + w[1].loss_mlm;
            if next > prev + 1e-6 {
                violations += 1;
            }
        }
        assert!(violations <= 5, "{violations} increases in 50 full-batch steps");
    }

    #[test]
    fn overlength_instances_are_skipped_and_counted() {
        let mut instances = toy_instances(10);
        let mut long = instances[0].clone();
        long.tokens = (0..40).map(|i| format!("w{i}")).collect();
        long.mention_labels.clear();
        long.mask_slots.clear();
        instances.push(long);
        let cfg = TrainConfig {
            max_updates: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        let outcome = train(&toy_spec(), &cfg, instances, None).unwrap();
        assert_eq!(outcome.skipped_overlength, 1);
    }

    #[test]
    fn train_log_tsv_has_one_row_per_update() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            max_updates: 5,
            seed: 2,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(&toy_spec(), &cfg, toy_instances(12), Some(dir.path())).unwrap();
        assert_eq!(outcome.log.len(), 5);
        let text = fs::read_to_string(dir.path().join("train_log.tsv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6); // header + 5 updates
        assert_eq!(lines[0], "update\tloss_repl\tloss_mlm\tacc_heldout\tseconds");
        assert!(dir.path().join("checkpoint_final.bin").exists());
    }
}
