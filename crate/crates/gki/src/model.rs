//! The ICD coding network: chunked text encoder, label cross-attention that
//! aggregates per-code evidence, and independent per-code sigmoid classifiers.

use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Id, Tape};
use crate::corpus::Vocab;
use crate::error::{GkiError, Result};
use crate::kb::{IcdCode, KnowledgeBase};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EncoderKind {
    /// Small trainable transformer encoder, the desk-scale default.
    TinyTransformer {
        layers: usize,
        heads: usize,
        ffn_dim: usize,
    },
    /// Order-free embedding bag; diagnostic encoder for position-free tests.
    BagOfWords,
    /// Placeholder for an external pretrained encoder; not available in this
    /// build, constructing a model with it fails with a clear error.
    PluggablePretrained { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub chunk_size: usize,
    pub num_codes: usize,
    pub encoder: EncoderKind,
    pub dropout_rate: f64,
    /// Scale cross-attention scores by 1/sqrt(D). Off by default: the label
    /// attention uses a plain softmax over query-key dot products.
    #[serde(default)]
    pub scale_attention: bool,
}

impl ModelConfig {
    pub fn tiny(num_codes: usize) -> ModelConfig {
        ModelConfig {
            hidden_dim: 128,
            chunk_size: 512,
            num_codes,
            encoder: EncoderKind::TinyTransformer {
                layers: 2,
                heads: 4,
                ffn_dim: 512,
            },
            dropout_rate: 0.1,
            scale_attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(GkiError::InvalidConfig {
                reason: "chunk_size must be >= 1".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(GkiError::InvalidConfig {
                reason: "dropout_rate must be in [0, 1)".into(),
            });
        }
        if let EncoderKind::TinyTransformer { heads, .. } = self.encoder {
            if heads == 0 || self.hidden_dim % heads != 0 {
                return Err(GkiError::InvalidConfig {
                    reason: format!(
                        "hidden_dim {} must be divisible by heads {}",
                        self.hidden_dim, heads
                    ),
                });
            }
        }
        if let EncoderKind::PluggablePretrained { name } = &self.encoder {
            return Err(GkiError::UnsupportedEncoder { name: name.clone() });
        }
        Ok(())
    }
}

/// Ordered named parameter tensors; order is stable and drives the optimizer
/// state and checkpoint layout.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamSet {
    fn new() -> ParamSet {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, value: Array2<f64>) {
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.values[idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.values[idx]
    }
}

#[derive(Debug, Clone)]
pub struct CodingModel {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
}

fn init_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        // Box-Muller
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen::<f64>();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

impl CodingModel {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<CodingModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let mut params = ParamSet::new();
        params.push("tok_emb", init_mat(&mut rng, vocab_size, d, 0.02));
        params.push("pos_emb", init_mat(&mut rng, config.chunk_size, d, 0.02));
        if let EncoderKind::TinyTransformer { layers, ffn_dim, .. } = config.encoder {
            let std = 0.02;
            for l in 0..layers {
                params.push(&format!("l{l}.wq"), init_mat(&mut rng, d, d, std));
                params.push(&format!("l{l}.bq"), Array2::zeros((1, d)));
                params.push(&format!("l{l}.wk"), init_mat(&mut rng, d, d, std));
                params.push(&format!("l{l}.bk"), Array2::zeros((1, d)));
                params.push(&format!("l{l}.wv"), init_mat(&mut rng, d, d, std));
                params.push(&format!("l{l}.bv"), Array2::zeros((1, d)));
                params.push(&format!("l{l}.wo"), init_mat(&mut rng, d, d, std));
                params.push(&format!("l{l}.bo"), Array2::zeros((1, d)));
                params.push(&format!("l{l}.ln1.g"), Array2::ones((1, d)));
                params.push(&format!("l{l}.ln1.b"), Array2::zeros((1, d)));
                params.push(&format!("l{l}.ffn.w1"), init_mat(&mut rng, d, ffn_dim, std));
                params.push(&format!("l{l}.ffn.b1"), Array2::zeros((1, ffn_dim)));
                params.push(&format!("l{l}.ffn.w2"), init_mat(&mut rng, ffn_dim, d, std));
                params.push(&format!("l{l}.ffn.b2"), Array2::zeros((1, d)));
                params.push(&format!("l{l}.ln2.g"), Array2::ones((1, d)));
                params.push(&format!("l{l}.ln2.b"), Array2::zeros((1, d)));
            }
        }
        params.push("ca.wk", init_mat(&mut rng, d, d, 0.02));
        params.push("ca.wv", init_mat(&mut rng, d, d, 0.02));
        params.push("ca.ln.g", Array2::ones((1, d)));
        params.push("ca.ln.b", Array2::zeros((1, d)));
        params.push("queries", init_mat(&mut rng, config.num_codes, d, 0.02));
        params.push("classifier", init_mat(&mut rng, config.num_codes, d, 0.02));
        Ok(CodingModel {
            config,
            vocab_size,
            params,
        })
    }

    /// Initialize each code query from its encoded description by elementwise
    /// max-pooling over token positions. The queries remain trainable.
    pub fn init_code_queries(&mut self, kb: &KnowledgeBase, vocab: &Vocab) -> Result<()> {
        assert_eq!(kb.num_codes(), self.config.num_codes);
        let mut q = Array2::zeros((self.config.num_codes, self.config.hidden_dim));
        for (i, code) in kb.label_space().iter().enumerate() {
            let entry = kb.entry(code)?;
            let ids = vocab.encode_text(&entry.description);
            if ids.is_empty() {
                return Err(GkiError::InvalidConfig {
                    reason: format!("code {} has an empty description", code.value()),
                });
            }
            let h = self.eval_encode(&ids);
            for d in 0..self.config.hidden_dim {
                let mut best = f64::NEG_INFINITY;
                for t in 0..h.nrows() {
                    best = best.max(h[(t, d)]);
                }
                q[(i, d)] = best;
            }
        }
        *self.params.get_mut("queries") = q;
        Ok(())
    }

    // ---------------- eval-mode forward (plain arrays, no tape) ------------

    fn eval_encode_chunk(&self, chunk: &[u32]) -> Array2<f64> {
        let d = self.config.hidden_dim;
        let n = chunk.len();
        let tok = self.params.get("tok_emb");
        let mut x = Array2::zeros((n, d));
        for (i, &id) in chunk.iter().enumerate() {
            x.row_mut(i).assign(&tok.row(id as usize));
        }
        match self.config.encoder {
            EncoderKind::BagOfWords => x,
            EncoderKind::PluggablePretrained { .. } => unreachable!("rejected at build"),
            EncoderKind::TinyTransformer { layers, heads, .. } => {
                let pos = self.params.get("pos_emb");
                x += &pos.slice(s![0..n, ..]);
                for l in 0..layers {
                    x = self.eval_layer(l, heads, x);
                }
                x
            }
        }
    }

    fn eval_layer(&self, l: usize, heads: usize, x: Array2<f64>) -> Array2<f64> {
        let d = self.config.hidden_dim;
        let dh = d / heads;
        let p = |suffix: &str| self.params.get(&format!("l{l}.{suffix}"));
        let q = x.dot(p("wq")) + p("bq");
        let k = x.dot(p("wk")) + p("bk");
        let v = x.dot(p("wv")) + p("bv");
        let n = x.nrows();
        let mut attn_out = Array2::zeros((n, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t()) / (dh as f64).sqrt();
            softmax_rows_inplace(&mut scores);
            let oh = scores.dot(&vh);
            attn_out.slice_mut(cols).assign(&oh);
        }
        let o = attn_out.dot(p("wo")) + p("bo");
        let x = layer_norm_rows(&(&x + &o), p("ln1.g"), p("ln1.b"));
        let f = (x.dot(p("ffn.w1")) + p("ffn.b1")).mapv(|e| e.max(0.0));
        let f = f.dot(p("ffn.w2")) + p("ffn.b2");
        layer_norm_rows(&(&x + &f), p("ln2.g"), p("ln2.b"))
    }

    /// Chunked encoding: split into consecutive chunks of at most
    /// `chunk_size` tokens, encode each independently (positions restart per
    /// chunk), concatenate along the length axis.
    pub fn eval_encode(&self, token_ids: &[u32]) -> Array2<f64> {
        assert!(!token_ids.is_empty());
        let mut parts = Vec::new();
        for chunk in token_ids.chunks(self.config.chunk_size) {
            parts.push(self.eval_encode_chunk(chunk));
        }
        if parts.len() == 1 {
            return parts.pop().unwrap();
        }
        let d = self.config.hidden_dim;
        let mut h = Array2::zeros((token_ids.len(), d));
        let mut at = 0;
        for part in parts {
            h.slice_mut(s![at..at + part.nrows(), ..]).assign(&part);
            at += part.nrows();
        }
        h
    }

    /// Evaluation-mode forward pass; returns attention, evidence, and
    /// per-code probabilities.
    pub fn eval_forward(&self, token_ids: &[u32]) -> EvalOutput {
        let h = self.eval_encode(token_ids);
        let q = self.params.get("queries");
        let (e, a) = label_cross_attention(
            &h,
            q,
            self.params.get("ca.wk"),
            self.params.get("ca.wv"),
            self.params.get("ca.ln.g"),
            self.params.get("ca.ln.b"),
            self.config.scale_attention,
        );
        let probs = classify(&e, self.params.get("classifier"));
        EvalOutput {
            h,
            attention: a,
            evidence: e,
            probs,
        }
    }

    // ---------------- train-mode forward (on a tape) ------------------------

    /// Push every parameter onto a fresh tape; the returned binding runs
    /// forward passes that share those parameter nodes.
    pub fn bind(&self) -> TapeBinding<'_> {
        let mut tape = Tape::new();
        let param_ids: Vec<Id> = self
            .params
            .values()
            .iter()
            .map(|v| tape.param(v.clone()))
            .collect();
        TapeBinding {
            model: self,
            tape,
            param_ids,
        }
    }
}

pub struct EvalOutput {
    pub h: Array2<f64>,
    pub attention: Array2<f64>,
    pub evidence: Array2<f64>,
    pub probs: Vec<f64>,
}

pub struct PassOutput {
    pub evidence: Id,
    pub attention: Id,
    pub probs: Id,
}

pub struct TapeBinding<'a> {
    model: &'a CodingModel,
    pub tape: Tape,
    param_ids: Vec<Id>,
}

impl<'a> TapeBinding<'a> {
    fn pid(&self, name: &str) -> Id {
        let idx = self
            .model
            .params
            .names()
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param_ids[idx]
    }

    fn maybe_dropout(&mut self, x: Id, rng: Option<&mut ChaCha8Rng>) -> Id {
        let p = self.model.config.dropout_rate;
        match rng {
            Some(rng) if p > 0.0 => {
                let shape = self.tape.value(x).raw_dim();
                let keep = 1.0 - p;
                let mask = Array2::from_shape_fn(shape, |_| {
                    if rng.gen::<f64>() < p {
                        0.0
                    } else {
                        1.0 / keep
                    }
                });
                self.tape.dropout(x, mask)
            }
            _ => x,
        }
    }

    fn encode_chunk(&mut self, chunk: &[u32], mut rng: Option<&mut ChaCha8Rng>) -> Id {
        let indices: Vec<usize> = chunk.iter().map(|&i| i as usize).collect();
        let tok = self.pid("tok_emb");
        let mut x = self.tape.gather(tok, &indices);
        match self.model.config.encoder {
            EncoderKind::BagOfWords => x,
            EncoderKind::PluggablePretrained { .. } => unreachable!("rejected at build"),
            EncoderKind::TinyTransformer { layers, heads, .. } => {
                let pos = self.pid("pos_emb");
                let pos_rows: Vec<usize> = (0..chunk.len()).collect();
                let pos_x = self.tape.gather(pos, &pos_rows);
                x = self.tape.add(x, pos_x);
                for l in 0..layers {
                    x = self.encode_layer(l, heads, x, rng.as_deref_mut());
                }
                x
            }
        }
    }

    fn encode_layer(
        &mut self,
        l: usize,
        heads: usize,
        x: Id,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Id {
        let d = self.model.config.hidden_dim;
        let dh = d / heads;
        let name = |suffix: &str| format!("l{l}.{suffix}");
        let wq = self.pid(&name("wq"));
        let bq = self.pid(&name("bq"));
        let wk = self.pid(&name("wk"));
        let bk = self.pid(&name("bk"));
        let wv = self.pid(&name("wv"));
        let bv = self.pid(&name("bv"));

        let q = self.tape.matmul(x, wq);
        let q = self.tape.add_row(q, bq);
        let k = self.tape.matmul(x, wk);
        let k = self.tape.add_row(k, bk);
        let v = self.tape.matmul(x, wv);
        let v = self.tape.add_row(v, bv);

        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = self.tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = self.tape.slice_cols(v, h * dh, (h + 1) * dh);
            let scores = self.tape.matmul_bt(qh, kh);
            let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let a = self.tape.softmax_rows(scores);
            head_outs.push(self.tape.matmul(a, vh));
        }
        let o = self.tape.concat_cols(&head_outs);
        let wo = self.pid(&name("wo"));
        let bo = self.pid(&name("bo"));
        let o = self.tape.matmul(o, wo);
        let o = self.tape.add_row(o, bo);
        let o = self.maybe_dropout(o, rng.as_deref_mut());
        let res = self.tape.add(x, o);
        let g1 = self.pid(&name("ln1.g"));
        let b1 = self.pid(&name("ln1.b"));
        let x = self.tape.layer_norm_rows(res, g1, b1);

        let w1 = self.pid(&name("ffn.w1"));
        let bf1 = self.pid(&name("ffn.b1"));
        let w2 = self.pid(&name("ffn.w2"));
        let bf2 = self.pid(&name("ffn.b2"));
        let f = self.tape.matmul(x, w1);
        let f = self.tape.add_row(f, bf1);
        let f = self.tape.relu(f);
        let f = self.tape.matmul(f, w2);
        let f = self.tape.add_row(f, bf2);
        let f = self.maybe_dropout(f, rng);
        let res = self.tape.add(x, f);
        let g2 = self.pid(&name("ln2.g"));
        let b2 = self.pid(&name("ln2.b"));
        self.tape.layer_norm_rows(res, g2, b2)
    }

    pub fn encode_chunked(&mut self, token_ids: &[u32], mut rng: Option<&mut ChaCha8Rng>) -> Id {
        assert!(!token_ids.is_empty());
        let mut parts = Vec::new();
        for chunk in token_ids.chunks(self.model.config.chunk_size) {
            parts.push(self.encode_chunk(chunk, rng.as_deref_mut()));
        }
        if parts.len() == 1 {
            parts[0]
        } else {
            self.tape.concat_rows(&parts)
        }
    }

    /// Full forward pass. With `rng` supplied, dropout is active (training
    /// mode); without it the pass is deterministic.
    pub fn forward(&mut self, token_ids: &[u32], rng: Option<&mut ChaCha8Rng>) -> PassOutput {
        let h = self.encode_chunked(token_ids, rng);
        let q = self.pid("queries");
        let wk = self.pid("ca.wk");
        let wv = self.pid("ca.wv");
        let k = self.tape.matmul(h, wk);
        let v = self.tape.matmul(h, wv);
        let mut scores = self.tape.matmul_bt(q, k);
        if self.model.config.scale_attention {
            scores = self
                .tape
                .scale(scores, 1.0 / (self.model.config.hidden_dim as f64).sqrt());
        }
        let a = self.tape.softmax_rows(scores);
        let e0 = self.tape.matmul(a, v);
        let g = self.pid("ca.ln.g");
        let b = self.pid("ca.ln.b");
        let e = self.tape.layer_norm_rows(e0, g, b);
        let w = self.pid("classifier");
        let logits = self.tape.elem_mul(e, w);
        let logits = self.tape.sum_rows(logits);
        let probs = self.tape.sigmoid(logits);
        PassOutput {
            evidence: e,
            attention: a,
            probs,
        }
    }

    /// Backward from a scalar root, returning gradients aligned with the
    /// model's parameter order (zeros where unused).
    pub fn param_grads(&self, root: Id) -> Vec<Array2<f64>> {
        let grads = self.tape.backward(root);
        self.param_ids
            .iter()
            .zip(self.model.params.values().iter())
            .map(|(&id, value)| {
                grads[id]
                    .clone()
                    .unwrap_or_else(|| Array2::zeros(value.raw_dim()))
            })
            .collect()
    }
}

fn softmax_rows_inplace(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|e| (e - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
}

pub fn layer_norm_rows(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / d;
        let sd = (var + LN_EPS).sqrt();
        for (j, e) in row.iter().enumerate() {
            out[(i, j)] = gain[(0, j)] * (e - mean) / sd + bias[(0, j)];
        }
    }
    out
}

/// A_i = softmax over tokens of Q_i (H W_k)^T; E_i = layernorm(A_i (H W_v)).
pub fn label_cross_attention(
    h: &Array2<f64>,
    q: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
    ln_gain: &Array2<f64>,
    ln_bias: &Array2<f64>,
    scale: bool,
) -> (Array2<f64>, Array2<f64>) {
    let k = h.dot(wk);
    let v = h.dot(wv);
    let mut scores = q.dot(&k.t());
    if scale {
        scores /= (q.ncols() as f64).sqrt();
    }
    softmax_rows_inplace(&mut scores);
    let e = layer_norm_rows(&scores.dot(&v), ln_gain, ln_bias);
    (e, scores)
}

/// p_i = sigmoid(E_i . W_i), independently per code.
pub fn classify(e: &Array2<f64>, w: &Array2<f64>) -> Vec<f64> {
    assert_eq!(e.dim(), w.dim(), "evidence/classifier shape mismatch");
    (0..e.nrows())
        .map(|i| {
            let z: f64 = e.row(i).dot(&w.row(i));
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

// ---------------------------- checkpointing --------------------------------

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub label_space: Vec<IcdCode>,
    pub vocab: Vocab,
    #[serde(default)]
    pub train_code_frequencies: Vec<usize>,
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
    tensors: Vec<NamedTensor>,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model(
        model: &CodingModel,
        label_space: &[IcdCode],
        vocab: &Vocab,
        train_code_frequencies: Vec<usize>,
        run_config: Option<serde_json::Value>,
    ) -> Checkpoint {
        let tensors = model
            .params
            .names()
            .iter()
            .zip(model.params.values().iter())
            .map(|(name, value)| NamedTensor {
                name: name.clone(),
                rows: value.nrows(),
                cols: value.ncols(),
                data: value.iter().cloned().collect(),
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: model.config.clone(),
            label_space: label_space.to_vec(),
            vocab: vocab.clone(),
            train_code_frequencies,
            run_config,
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<CodingModel> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(GkiError::Checkpoint {
                reason: format!("unsupported format version {}", self.format_version),
            });
        }
        let mut model = CodingModel::new(self.config.clone(), self.vocab.len(), 0)?;
        if self.tensors.len() != model.params.len() {
            return Err(GkiError::Checkpoint {
                reason: format!(
                    "expected {} tensors, found {}",
                    model.params.len(),
                    self.tensors.len()
                ),
            });
        }
        for (slot_name, tensor) in model
            .params
            .names()
            .to_vec()
            .iter()
            .zip(self.tensors.iter())
        {
            if slot_name != &tensor.name {
                return Err(GkiError::Checkpoint {
                    reason: format!("tensor order mismatch: {} vs {}", slot_name, tensor.name),
                });
            }
            let value = Array2::from_shape_vec((tensor.rows, tensor.cols), tensor.data.clone())
                .map_err(|e| GkiError::Checkpoint {
                    reason: format!("tensor {}: {e}", tensor.name),
                })?;
            *model.params.get_mut(slot_name) = value;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, json).map_err(|e| GkiError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GkiError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| GkiError::Checkpoint {
            reason: e.to_string(),
        })
    }
}
