//! Forward pass: encoder, heads, and losses.

use ndarray::{s, Array1, Array2};
use rand::Rng;

use crate::corpus::Label;
use crate::span::Span;

use super::{ModelConfig, ModelParams, NnError};

/// Numerical floor used when clamping probabilities before logs.
pub const PROB_EPSILON: f64 = 1e-7;

const LN_EPSILON: f64 = 1e-12;
const MASKED_SCORE: f64 = -1e30;

pub(crate) fn gelu(x: f64) -> f64 {
    // tanh approximation; the backward pass uses its exact derivative
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cached layer-norm intermediates for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Array2<f64>, LnCache) {
    let (rows, cols) = x.dim();
    let mut out = Array2::zeros((rows, cols));
    let mut x_hat = Array2::zeros((rows, cols));
    let mut inv_std = Array1::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + LN_EPSILON).sqrt();
        inv_std[r] = istd;
        for c in 0..cols {
            let xh = (x[[r, c]] - mean) * istd;
            x_hat[[r, c]] = xh;
            out[[r, c]] = gamma[c] * xh + beta[c];
        }
    }
    (out, LnCache { x_hat, inv_std })
}

/// Per-layer cached activations, sufficient for exact backpropagation
/// without recomputation.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub input: Array2<f64>,
    pub queries: Array2<f64>,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    /// Per-head attention probabilities, each (seq, seq).
    pub attn_probs: Vec<Array2<f64>>,
    pub context: Array2<f64>,
    pub ln_attn: LnCache,
    pub hidden_mid: Array2<f64>,
    pub ff_pre: Array2<f64>,
    pub ff_act: Array2<f64>,
    pub ln_ff: LnCache,
}

/// Everything the backward pass needs from one forward run.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) ids: Vec<usize>,
    pub(crate) ln_emb: LnCache,
    pub(crate) layers: Vec<LayerTrace>,
    pub(crate) drop_mask: Option<Array2<f64>>,
}

/// Dropout behaviour for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum DropoutSpec<'a> {
    /// No dropout; inference mode.
    Inference,
    /// Inverted dropout with a pre-sampled elementwise mask of scale factors
    /// (0 or 1/(1-p)). Recording the mask keeps finite-difference checks and
    /// backprop consistent with the forward pass.
    Train(&'a Array2<f64>),
}

/// Sample an inverted-dropout mask: each element is 0 with probability `p`,
/// otherwise `1/(1-p)`.
pub fn sample_dropout_mask<R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<f64> {
    let keep_scale = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| {
        if p > 0.0 && rng.gen_bool(p) {
            0.0
        } else {
            keep_scale
        }
    })
}

/// Run the encoder over a padded index sequence.
///
/// `ids` must be framed as `bos .. eos` within the first `valid_len`
/// positions; positions past `valid_len` are padding and are masked out of
/// attention. Returns one hidden vector per position plus the trace.
pub fn encode(
    params: &ModelParams,
    config: &ModelConfig,
    ids: &[usize],
    valid_len: usize,
    dropout: DropoutSpec,
) -> Result<(Array2<f64>, ForwardTrace), NnError> {
    let seq = ids.len();
    if seq > config.max_len {
        return Err(NnError::Overlength {
            len: seq,
            max_len: config.max_len,
        });
    }
    if valid_len < 2 || valid_len > seq {
        return Err(NnError::BadFraming);
    }
    for &id in ids {
        if id >= config.vocab {
            return Err(NnError::TokenOutOfRange {
                id,
                vocab: config.vocab,
            });
        }
    }
    if ids[0] != config.bos_token || ids[valid_len - 1] != config.eos_token {
        return Err(NnError::BadFraming);
    }

    let h = config.hidden;
    let heads = config.heads;
    let d = config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();

    // embeddings
    let mut x0 = Array2::zeros((seq, h));
    for (pos, &id) in ids.iter().enumerate() {
        for c in 0..h {
            x0[[pos, c]] = params.tok_emb[[id, c]] + params.pos_emb[[pos, c]];
        }
    }
    let (mut hidden, ln_emb) =
        layer_norm_forward(&x0, &params.ln_emb.gamma, &params.ln_emb.beta);

    let mut layer_traces = Vec::with_capacity(config.layers);
    for layer in &params.layers {
        let input = hidden.clone();
        let queries = input.dot(&layer.w_query) + &layer.b_query;
        let keys = input.dot(&layer.w_key) + &layer.b_key;
        let values = input.dot(&layer.w_value) + &layer.b_value;

        let mut context = Array2::zeros((seq, h));
        let mut attn_probs = Vec::with_capacity(heads);
        for a in 0..heads {
            let lo = a * d;
            let hi = (a + 1) * d;
            let q_a = queries.slice(s![.., lo..hi]);
            let k_a = keys.slice(s![.., lo..hi]);
            let v_a = values.slice(s![.., lo..hi]);
            let mut scores = q_a.dot(&k_a.t());
            scores.mapv_inplace(|v| v * scale);
            // keys at padded positions are invisible to every query
            for qi in 0..seq {
                for ki in valid_len..seq {
                    scores[[qi, ki]] = MASKED_SCORE;
                }
            }
            // row-wise softmax
            for qi in 0..seq {
                let mut row = scores.row_mut(qi);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let probs = scores;
            let ctx_a = probs.dot(&v_a);
            context.slice_mut(s![.., lo..hi]).assign(&ctx_a);
            attn_probs.push(probs);
        }

        let attn_out = context.dot(&layer.w_out) + &layer.b_out;
        let res_attn = &input + &attn_out;
        let (hidden_mid, ln_attn) =
            layer_norm_forward(&res_attn, &layer.ln_attn.gamma, &layer.ln_attn.beta);

        let ff_pre = hidden_mid.dot(&layer.w_ff1) + &layer.b_ff1;
        let ff_act = ff_pre.mapv(gelu);
        let ff_out = ff_act.dot(&layer.w_ff2) + &layer.b_ff2;
        let res_ff = &hidden_mid + &ff_out;
        let (out, ln_ff) = layer_norm_forward(&res_ff, &layer.ln_ff.gamma, &layer.ln_ff.beta);

        layer_traces.push(LayerTrace {
            input,
            queries,
            keys,
            values,
            attn_probs,
            context,
            ln_attn,
            hidden_mid,
            ff_pre,
            ff_act,
            ln_ff,
        });
        hidden = out;
    }

    let (final_hidden, drop_mask) = match dropout {
        DropoutSpec::Inference => (hidden, None),
        DropoutSpec::Train(mask) => (&hidden * mask, Some(mask.clone())),
    };

    let trace = ForwardTrace {
        ids: ids.to_vec(),
        ln_emb,
        layers: layer_traces,
        drop_mask,
    };
    Ok((final_hidden, trace))
}

/// Raw replacement-head output for a mention span (in encoded coordinates):
/// `linear(concat(h[start-1], h[end]))`.
pub fn replacement_logit(
    params: &ModelParams,
    hidden: &Array2<f64>,
    span: Span,
) -> Result<f64, NnError> {
    let seq = hidden.nrows();
    let h = hidden.ncols();
    if span.is_empty() || span.start == 0 || span.end >= seq {
        return Err(NnError::DegenerateSpan {
            start: span.start,
            end: span.end,
            len: seq,
        });
    }
    let left = hidden.row(span.start - 1);
    let right = hidden.row(span.end);
    let mut z = params.repl_b;
    for c in 0..h {
        z += params.repl_w[c] * left[c] + params.repl_w[h + c] * right[c];
    }
    Ok(z)
}

/// `P(e|C)`: the probability that the mention at `span` is an original
/// (un-replaced) entity, from the boundary-word head.
pub fn replacement_prob(
    params: &ModelParams,
    hidden: &Array2<f64>,
    span: Span,
) -> Result<f64, NnError> {
    Ok(sigmoid(replacement_logit(params, hidden, span)?))
}

/// Negative mean of the per-mention binary objective: kept mentions score
/// `log p`, replaced mentions `log (1-p)`, probabilities clamped to
/// `[eps, 1-eps]`. An empty mention list contributes zero loss.
pub fn replacement_loss(probs: &[f64], labels: &[Label]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    if probs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (&p, label) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
        total += match label {
            Label::Kept => p.ln(),
            Label::Replaced => (1.0 - p).ln(),
        };
    }
    -total / probs.len() as f64
}

/// Log-softmax of the MLM head at one position.
pub fn mlm_log_softmax(params: &ModelParams, hidden: &Array2<f64>, pos: usize) -> Array1<f64> {
    let logits = hidden.row(pos).dot(&params.mlm_w) + &params.mlm_b;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let log_sum = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.mapv(|v| v - log_sum)
}

/// Mean cross-entropy of the MLM head at the masked positions against the
/// original token ids. Empty slots contribute zero.
pub fn mlm_loss(params: &ModelParams, hidden: &Array2<f64>, slots: &[(usize, usize)]) -> f64 {
    if slots.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &(pos, target) in slots {
        total -= mlm_log_softmax(params, hidden, pos)[target];
    }
    total / slots.len() as f64
}

/// A mention target in encoded (bos-shifted) coordinates.
#[derive(Debug, Clone)]
pub struct EncodedMention {
    pub span: Span,
    pub label: Label,
}

/// One instance prepared for the encoder: framed ids, valid length, mention
/// targets and `(position, target token)` mask slots, all in encoded
/// coordinates.
#[derive(Debug, Clone)]
pub struct InstanceTask {
    pub ids: Vec<usize>,
    pub valid_len: usize,
    pub mentions: Vec<EncodedMention>,
    pub masks: Vec<(usize, usize)>,
}

/// Forward results for one instance, kept around for the backward pass.
#[derive(Debug)]
pub struct InstanceForward {
    pub trace: ForwardTrace,
    pub hidden: Array2<f64>,
    pub mention_probs: Vec<f64>,
    /// Log-softmax rows of the MLM head at each mask slot.
    pub mask_log_probs: Vec<Array1<f64>>,
}

/// Encode an instance and evaluate both heads.
pub fn forward_instance(
    params: &ModelParams,
    config: &ModelConfig,
    task: &InstanceTask,
    dropout: DropoutSpec,
) -> Result<InstanceForward, NnError> {
    let (hidden, trace) = encode(params, config, &task.ids, task.valid_len, dropout)?;
    let mention_probs = task
        .mentions
        .iter()
        .map(|m| replacement_prob(params, &hidden, m.span))
        .collect::<Result<Vec<_>, _>>()?;
    let mask_log_probs = task
        .masks
        .iter()
        .map(|&(pos, _)| mlm_log_softmax(params, &hidden, pos))
        .collect();
    Ok(InstanceForward {
        trace,
        hidden,
        mention_probs,
        mask_log_probs,
    })
}
