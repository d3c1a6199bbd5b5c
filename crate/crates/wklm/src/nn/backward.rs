//! Exact backpropagation through the encoder and both heads.
//!
//! Gradients accumulate into a caller-owned [`ModelParams`]-shaped buffer in
//! a fixed order, so batched accumulation is deterministic.

use ndarray::{s, Array1, Array2};

use crate::corpus::Label;

use super::forward::{gelu_prime, InstanceForward, InstanceTask, LnCache, PROB_EPSILON};
use super::{ModelConfig, ModelParams, NnError};

/// Backward through one layer norm. Returns the input gradient and
/// accumulates the gain/shift gradients.
fn layer_norm_backward(
    d_out: &Array2<f64>,
    cache: &LnCache,
    gamma: &Array1<f64>,
    d_gamma: &mut Array1<f64>,
    d_beta: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, cols) = d_out.dim();
    let n = cols as f64;
    let mut d_x = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..cols {
            let dy = d_out[[r, c]];
            let xh = cache.x_hat[[r, c]];
            d_gamma[c] += dy * xh;
            d_beta[c] += dy;
            let dxhat = dy * gamma[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh;
        }
        let istd = cache.inv_std[r];
        for c in 0..cols {
            let dxhat = d_out[[r, c]] * gamma[c];
            d_x[[r, c]] =
                istd / n * (n * dxhat - sum_dxhat - cache.x_hat[[r, c]] * sum_dxhat_xhat);
        }
    }
    d_x
}

fn add_colsum(target: &mut Array1<f64>, source: &Array2<f64>) {
    for row in source.rows() {
        for (c, v) in row.iter().enumerate() {
            target[c] += v;
        }
    }
}

/// Accumulate the gradients of the weighted instance loss
/// `mention_coef * sum_m J_m + mask_coef * sum_k CE_k` into `grads`.
///
/// `mention_coef` and `mask_coef` carry both the objective weights and the
/// batch-mean normalization, so summing over a batch of instances produces
/// the gradient of the batch loss. Instances with no mentions and no masks
/// contribute exactly zero.
pub fn backward_instance(
    params: &ModelParams,
    config: &ModelConfig,
    task: &InstanceTask,
    fwd: &InstanceForward,
    mention_coef: f64,
    mask_coef: f64,
    grads: &mut ModelParams,
) -> Result<(), NnError> {
    let trace = &fwd.trace;
    let seq = trace.ids.len();
    let h = config.hidden;
    let heads = config.heads;
    let d = config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();

    // gradient at the (post-dropout) final hidden states
    let mut d_final: Array2<f64> = Array2::zeros((seq, h));

    // replacement head
    if mention_coef != 0.0 {
        for (m, p) in task.mentions.iter().zip(&fwd.mention_probs) {
            let p = *p;
            // clamping freezes the loss outside [eps, 1-eps]
            if p <= PROB_EPSILON || p >= 1.0 - PROB_EPSILON {
                continue;
            }
            let target = match m.label {
                Label::Kept => 1.0,
                Label::Replaced => 0.0,
            };
            let d_logit = mention_coef * (p - target);
            let left = m.span.start - 1;
            let right = m.span.end;
            for c in 0..h {
                grads.repl_w[c] += d_logit * fwd.hidden[[left, c]];
                grads.repl_w[h + c] += d_logit * fwd.hidden[[right, c]];
                d_final[[left, c]] += d_logit * params.repl_w[c];
                d_final[[right, c]] += d_logit * params.repl_w[h + c];
            }
            grads.repl_b += d_logit;
        }
    }

    // MLM head
    if mask_coef != 0.0 {
        for (&(pos, target), log_probs) in task.masks.iter().zip(&fwd.mask_log_probs) {
            for v in 0..config.vocab {
                let mut d_logit = mask_coef * log_probs[v].exp();
                if v == target {
                    d_logit -= mask_coef;
                }
                if d_logit == 0.0 {
                    continue;
                }
                grads.mlm_b[v] += d_logit;
                for c in 0..h {
                    grads.mlm_w[[c, v]] += d_logit * fwd.hidden[[pos, c]];
                    d_final[[pos, c]] += d_logit * params.mlm_w[[c, v]];
                }
            }
        }
    }

    // dropout (inverted): backward is the same elementwise scaling
    let mut d_hidden = match &trace.drop_mask {
        Some(mask) => &d_final * mask,
        None => d_final,
    };

    // encoder layers in reverse
    for l in (0..config.layers).rev() {
        let layer = &params.layers[l];
        let lt = &trace.layers[l];
        let gl = &mut grads.layers[l];

        // output layer norm
        let d_res_ff = layer_norm_backward(
            &d_hidden,
            &lt.ln_ff,
            &layer.ln_ff.gamma,
            &mut gl.ln_ff.gamma,
            &mut gl.ln_ff.beta,
        );

        // feed-forward block with residual
        let mut d_hidden_mid = d_res_ff.clone();
        let d_ff_out = d_res_ff;
        gl.w_ff2 = &gl.w_ff2 + &lt.ff_act.t().dot(&d_ff_out);
        add_colsum(&mut gl.b_ff2, &d_ff_out);
        let d_ff_act = d_ff_out.dot(&layer.w_ff2.t());
        let mut d_ff_pre = d_ff_act;
        d_ff_pre.zip_mut_with(&lt.ff_pre, |g, &x| *g *= gelu_prime(x));
        gl.w_ff1 = &gl.w_ff1 + &lt.hidden_mid.t().dot(&d_ff_pre);
        add_colsum(&mut gl.b_ff1, &d_ff_pre);
        d_hidden_mid = d_hidden_mid + d_ff_pre.dot(&layer.w_ff1.t());

        // attention layer norm
        let d_res_attn = layer_norm_backward(
            &d_hidden_mid,
            &lt.ln_attn,
            &layer.ln_attn.gamma,
            &mut gl.ln_attn.gamma,
            &mut gl.ln_attn.beta,
        );

        // attention block with residual
        let mut d_input = d_res_attn.clone();
        let d_attn_out = d_res_attn;
        gl.w_out = &gl.w_out + &lt.context.t().dot(&d_attn_out);
        add_colsum(&mut gl.b_out, &d_attn_out);
        let d_context = d_attn_out.dot(&layer.w_out.t());

        let mut d_queries: Array2<f64> = Array2::zeros((seq, h));
        let mut d_keys: Array2<f64> = Array2::zeros((seq, h));
        let mut d_values: Array2<f64> = Array2::zeros((seq, h));
        for a in 0..heads {
            let lo = a * d;
            let hi = (a + 1) * d;
            let probs = &lt.attn_probs[a];
            let d_ctx_a = d_context.slice(s![.., lo..hi]);
            let v_a = lt.values.slice(s![.., lo..hi]);
            let q_a = lt.queries.slice(s![.., lo..hi]);
            let k_a = lt.keys.slice(s![.., lo..hi]);

            let d_probs = d_ctx_a.dot(&v_a.t());
            d_values
                .slice_mut(s![.., lo..hi])
                .assign(&probs.t().dot(&d_ctx_a));

            // softmax backward, row-wise
            let mut d_scores = Array2::zeros((seq, seq));
            for r in 0..seq {
                let mut dot = 0.0;
                for c in 0..seq {
                    dot += d_probs[[r, c]] * probs[[r, c]];
                }
                for c in 0..seq {
                    d_scores[[r, c]] = probs[[r, c]] * (d_probs[[r, c]] - dot);
                }
            }
            d_scores.mapv_inplace(|v| v * scale);
            d_queries
                .slice_mut(s![.., lo..hi])
                .assign(&d_scores.dot(&k_a));
            d_keys
                .slice_mut(s![.., lo..hi])
                .assign(&d_scores.t().dot(&q_a));
        }

        gl.w_query = &gl.w_query + &lt.input.t().dot(&d_queries);
        add_colsum(&mut gl.b_query, &d_queries);
        gl.w_key = &gl.w_key + &lt.input.t().dot(&d_keys);
        add_colsum(&mut gl.b_key, &d_keys);
        gl.w_value = &gl.w_value + &lt.input.t().dot(&d_values);
        add_colsum(&mut gl.b_value, &d_values);

        d_input = d_input
            + d_queries.dot(&layer.w_query.t())
            + d_keys.dot(&layer.w_key.t())
            + d_values.dot(&layer.w_value.t());
        d_hidden = d_input;
    }

    // embedding layer norm and embedding tables
    let d_x0 = layer_norm_backward(
        &d_hidden,
        &trace.ln_emb,
        &params.ln_emb.gamma,
        &mut grads.ln_emb.gamma,
        &mut grads.ln_emb.beta,
    );
    for (pos, &id) in trace.ids.iter().enumerate() {
        for c in 0..h {
            grads.tok_emb[[id, c]] += d_x0[[pos, c]];
            grads.pos_emb[[pos, c]] += d_x0[[pos, c]];
        }
    }
    Ok(())
}
