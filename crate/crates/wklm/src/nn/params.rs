//! Parameter containers, initialization, and flat-vector views.
//!
//! The optimizer and the finite-difference checks operate on a single flat
//! `Vec<f64>`; [`ParamLayout`] records the name, shape and weight-decay
//! eligibility of every tensor in that vector, in a fixed order shared by
//! [`ModelParams::to_flat`] and [`ModelParams::copy_from_flat`].

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormParams {
    fn ones(dim: usize) -> Self {
        LayerNormParams {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn zeros(dim: usize) -> Self {
        LayerNormParams {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_query: Array2<f64>,
    pub b_query: Array1<f64>,
    pub w_key: Array2<f64>,
    pub b_key: Array1<f64>,
    pub w_value: Array2<f64>,
    pub b_value: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub ln_attn: LayerNormParams,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
    pub ln_ff: LayerNormParams,
}

/// All weights of the encoder plus the replacement and MLM heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub ln_emb: LayerNormParams,
    pub layers: Vec<LayerParams>,
    /// Replacement head: (2*hidden) weight vector + scalar bias over the
    /// concatenated boundary-word representations.
    pub repl_w: Array1<f64>,
    pub repl_b: f64,
    /// MLM head: hidden -> vocab projection.
    pub mlm_w: Array2<f64>,
    pub mlm_b: Array1<f64>,
}

enum TensorRef<'a> {
    A1(&'a Array1<f64>),
    A2(&'a Array2<f64>),
    Scalar(&'a f64),
}

enum TensorMut<'a> {
    A1(&'a mut Array1<f64>),
    A2(&'a mut Array2<f64>),
    Scalar(&'a mut f64),
}

/// Name, flat range, shape and decay eligibility of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub decay: bool,
}

/// Fixed flat ordering of all parameter tensors for a config.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let h = config.hidden;
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>, decay: bool| {
            let len: usize = shape.iter().product();
            tensors.push(TensorSpec {
                name,
                shape,
                offset,
                len,
                decay,
            });
            offset += len;
        };
        push("tok_emb".into(), vec![config.vocab, h], true);
        push("pos_emb".into(), vec![config.max_len, h], true);
        push("ln_emb.gamma".into(), vec![h], false);
        push("ln_emb.beta".into(), vec![h], false);
        for l in 0..config.layers {
            push(format!("layer{l}.w_query"), vec![h, h], true);
            push(format!("layer{l}.b_query"), vec![h], false);
            push(format!("layer{l}.w_key"), vec![h, h], true);
            push(format!("layer{l}.b_key"), vec![h], false);
            push(format!("layer{l}.w_value"), vec![h, h], true);
            push(format!("layer{l}.b_value"), vec![h], false);
            push(format!("layer{l}.w_out"), vec![h, h], true);
            push(format!("layer{l}.b_out"), vec![h], false);
            push(format!("layer{l}.ln_attn.gamma"), vec![h], false);
            push(format!("layer{l}.ln_attn.beta"), vec![h], false);
            push(format!("layer{l}.w_ff1"), vec![h, config.ff_dim], true);
            push(format!("layer{l}.b_ff1"), vec![config.ff_dim], false);
            push(format!("layer{l}.w_ff2"), vec![config.ff_dim, h], true);
            push(format!("layer{l}.b_ff2"), vec![h], false);
            push(format!("layer{l}.ln_ff.gamma"), vec![h], false);
            push(format!("layer{l}.ln_ff.beta"), vec![h], false);
        }
        push("repl.w".into(), vec![2 * h], true);
        push("repl.b".into(), vec![1], false);
        push("mlm.w".into(), vec![h, config.vocab], true);
        push("mlm.b".into(), vec![config.vocab], false);
        ParamLayout {
            tensors,
            total: offset,
        }
    }

    /// Name of the tensor owning flat index `i`.
    pub fn tensor_at(&self, i: usize) -> &TensorSpec {
        self.tensors
            .iter()
            .find(|t| i >= t.offset && i < t.offset + t.len)
            .expect("index within layout")
    }

    /// Per-index weight-decay eligibility mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for t in &self.tensors {
            if t.decay {
                mask[t.offset..t.offset + t.len].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

impl ModelParams {
    /// Random initialization: normal(0, 0.02) weights, zero biases, unit
    /// layer-norm gains.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let h = config.hidden;
        let draw = move |rng: &mut R| normal.sample(rng);
        let mat = |rng: &mut R, r: usize, c: usize| {
            let mut m = Array2::zeros((r, c));
            for v in m.iter_mut() {
                *v = draw(rng);
            }
            m
        };
        // draw order is fixed: embeddings, layers, then heads
        let tok_emb = mat(rng, config.vocab, h);
        let pos_emb = mat(rng, config.max_len, h);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_query: mat(rng, h, h),
                b_query: Array1::zeros(h),
                w_key: mat(rng, h, h),
                b_key: Array1::zeros(h),
                w_value: mat(rng, h, h),
                b_value: Array1::zeros(h),
                w_out: mat(rng, h, h),
                b_out: Array1::zeros(h),
                ln_attn: LayerNormParams::ones(h),
                w_ff1: mat(rng, h, config.ff_dim),
                b_ff1: Array1::zeros(config.ff_dim),
                w_ff2: mat(rng, config.ff_dim, h),
                b_ff2: Array1::zeros(h),
                ln_ff: LayerNormParams::ones(h),
            })
            .collect();
        let repl_w = {
            let mut v = Array1::zeros(2 * h);
            for x in v.iter_mut() {
                *x = normal.sample(rng);
            }
            v
        };
        let mlm_w = mat(rng, h, config.vocab);
        ModelParams {
            tok_emb,
            pos_emb,
            ln_emb: LayerNormParams::ones(h),
            layers,
            repl_w,
            repl_b: 0.0,
            mlm_w,
            mlm_b: Array1::zeros(config.vocab),
        }
    }

    /// All-zero parameters with the shapes of `config` (gradient buffers).
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden;
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_query: Array2::zeros((h, h)),
                b_query: Array1::zeros(h),
                w_key: Array2::zeros((h, h)),
                b_key: Array1::zeros(h),
                w_value: Array2::zeros((h, h)),
                b_value: Array1::zeros(h),
                w_out: Array2::zeros((h, h)),
                b_out: Array1::zeros(h),
                ln_attn: LayerNormParams::zeros(h),
                w_ff1: Array2::zeros((h, config.ff_dim)),
                b_ff1: Array1::zeros(config.ff_dim),
                w_ff2: Array2::zeros((config.ff_dim, h)),
                b_ff2: Array1::zeros(h),
                ln_ff: LayerNormParams::zeros(h),
            })
            .collect();
        ModelParams {
            tok_emb: Array2::zeros((config.vocab, h)),
            pos_emb: Array2::zeros((config.max_len, h)),
            ln_emb: LayerNormParams::zeros(h),
            layers,
            repl_w: Array1::zeros(2 * h),
            repl_b: 0.0,
            mlm_w: Array2::zeros((h, config.vocab)),
            mlm_b: Array1::zeros(config.vocab),
        }
    }

    fn tensor_refs(&self) -> Vec<TensorRef<'_>> {
        let mut refs = vec![
            TensorRef::A2(&self.tok_emb),
            TensorRef::A2(&self.pos_emb),
            TensorRef::A1(&self.ln_emb.gamma),
            TensorRef::A1(&self.ln_emb.beta),
        ];
        for layer in &self.layers {
            refs.push(TensorRef::A2(&layer.w_query));
            refs.push(TensorRef::A1(&layer.b_query));
            refs.push(TensorRef::A2(&layer.w_key));
            refs.push(TensorRef::A1(&layer.b_key));
            refs.push(TensorRef::A2(&layer.w_value));
            refs.push(TensorRef::A1(&layer.b_value));
            refs.push(TensorRef::A2(&layer.w_out));
            refs.push(TensorRef::A1(&layer.b_out));
            refs.push(TensorRef::A1(&layer.ln_attn.gamma));
            refs.push(TensorRef::A1(&layer.ln_attn.beta));
            refs.push(TensorRef::A2(&layer.w_ff1));
            refs.push(TensorRef::A1(&layer.b_ff1));
            refs.push(TensorRef::A2(&layer.w_ff2));
            refs.push(TensorRef::A1(&layer.b_ff2));
            refs.push(TensorRef::A1(&layer.ln_ff.gamma));
            refs.push(TensorRef::A1(&layer.ln_ff.beta));
        }
        refs.push(TensorRef::A1(&self.repl_w));
        refs.push(TensorRef::Scalar(&self.repl_b));
        refs.push(TensorRef::A2(&self.mlm_w));
        refs.push(TensorRef::A1(&self.mlm_b));
        refs
    }

    fn tensor_muts(&mut self) -> Vec<TensorMut<'_>> {
        let mut refs: Vec<TensorMut<'_>> = vec![
            TensorMut::A2(&mut self.tok_emb),
            TensorMut::A2(&mut self.pos_emb),
            TensorMut::A1(&mut self.ln_emb.gamma),
            TensorMut::A1(&mut self.ln_emb.beta),
        ];
        for layer in &mut self.layers {
            refs.push(TensorMut::A2(&mut layer.w_query));
            refs.push(TensorMut::A1(&mut layer.b_query));
            refs.push(TensorMut::A2(&mut layer.w_key));
            refs.push(TensorMut::A1(&mut layer.b_key));
            refs.push(TensorMut::A2(&mut layer.w_value));
            refs.push(TensorMut::A1(&mut layer.b_value));
            refs.push(TensorMut::A2(&mut layer.w_out));
            refs.push(TensorMut::A1(&mut layer.b_out));
            refs.push(TensorMut::A1(&mut layer.ln_attn.gamma));
            refs.push(TensorMut::A1(&mut layer.ln_attn.beta));
            refs.push(TensorMut::A2(&mut layer.w_ff1));
            refs.push(TensorMut::A1(&mut layer.b_ff1));
            refs.push(TensorMut::A2(&mut layer.w_ff2));
            refs.push(TensorMut::A1(&mut layer.b_ff2));
            refs.push(TensorMut::A1(&mut layer.ln_ff.gamma));
            refs.push(TensorMut::A1(&mut layer.ln_ff.beta));
        }
        refs.push(TensorMut::A1(&mut self.repl_w));
        refs.push(TensorMut::Scalar(&mut self.repl_b));
        refs.push(TensorMut::A2(&mut self.mlm_w));
        refs.push(TensorMut::A1(&mut self.mlm_b));
        refs
    }

    /// Concatenate all tensors into one flat vector, in layout order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for r in self.tensor_refs() {
            match r {
                TensorRef::A1(a) => flat.extend(a.iter()),
                TensorRef::A2(a) => flat.extend(a.iter()),
                TensorRef::Scalar(s) => flat.push(*s),
            }
        }
        flat
    }

    /// Overwrite all tensors from a flat vector in layout order.
    pub fn copy_from_flat(&mut self, flat: &[f64]) {
        let mut cursor = 0usize;
        for r in self.tensor_muts() {
            match r {
                TensorMut::A1(a) => {
                    for v in a.iter_mut() {
                        *v = flat[cursor];
                        cursor += 1;
                    }
                }
                TensorMut::A2(a) => {
                    for v in a.iter_mut() {
                        *v = flat[cursor];
                        cursor += 1;
                    }
                }
                TensorMut::Scalar(s) => {
                    *s = flat[cursor];
                    cursor += 1;
                }
            }
        }
        assert_eq!(cursor, flat.len(), "flat vector length mismatch");
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}
