//! Multi-task optimization: paired raw/guideline forward passes, the
//! three-term loss, R-Drop regularization, and a warmup-then-linear-decay
//! learning-rate schedule.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Document, EncodedExample, Vocab};
use crate::error::{GkiError, Result};
use crate::guideline::{self, GuidelineOptions};
use crate::kb::KnowledgeBase;
use crate::metrics::{self, EvalBatch, MetricReport};
use crate::model::{Checkpoint, CodingModel, EncoderKind, ModelConfig};

const PROB_EPS: f64 = 1e-7;
const NORM_EPS: f64 = 1e-12;

// ----------------------------- configuration -------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryInit {
    /// Description-based init when knowledge injection is on, random otherwise.
    Auto,
    Description,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub chunk_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub scale_attention: bool,
    /// "tiny_transformer", "bag_of_words", or a pretrained encoder name.
    pub encoder: String,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            hidden_dim: 128,
            chunk_size: 512,
            layers: 2,
            heads: 4,
            ffn_dim: 512,
            dropout_rate: 0.1,
            scale_attention: false,
            encoder: "tiny_transformer".to_string(),
        }
    }
}

impl ModelSettings {
    pub fn to_model_config(&self, num_codes: usize) -> ModelConfig {
        let encoder = match self.encoder.as_str() {
            "tiny_transformer" => EncoderKind::TinyTransformer {
                layers: self.layers,
                heads: self.heads,
                ffn_dim: self.ffn_dim,
            },
            "bag_of_words" => EncoderKind::BagOfWords,
            other => EncoderKind::PluggablePretrained {
                name: other.to_string(),
            },
        };
        ModelConfig {
            hidden_dim: self.hidden_dim,
            chunk_size: self.chunk_size,
            num_codes,
            encoder,
            dropout_rate: self.dropout_rate,
            scale_attention: self.scale_attention,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub lambda_sim: f64,
    pub rdrop_alpha: f64,
    pub seed: u64,
    pub use_synonyms: bool,
    pub use_hierarchy: bool,
    /// Off = the "without knowledge" baseline: no guideline pass, no
    /// similarity loss, random query init (under QueryInit::Auto).
    pub knowledge_injection: bool,
    pub max_tokens: usize,
    pub threshold: f64,
    /// Treat the guideline evidence as a frozen target in the similarity loss.
    pub sim_stop_gradient: bool,
    /// One cosine over the flattened masked matrices instead of a row mean.
    pub sim_flattened: bool,
    pub query_init: QueryInit,
    pub corpus_dir: PathBuf,
    pub kb_path: PathBuf,
    pub model: ModelSettings,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 5e-5,
            epochs: 12,
            warmup_steps: 2000,
            batch_size: 8,
            lambda_sim: 1.0,
            rdrop_alpha: 5.0,
            seed: 0,
            use_synonyms: true,
            use_hierarchy: true,
            knowledge_injection: true,
            max_tokens: corpus::DEFAULT_MAX_TOKENS,
            threshold: 0.5,
            sim_stop_gradient: false,
            sim_flattened: false,
            query_init: QueryInit::Auto,
            corpus_dir: PathBuf::new(),
            kb_path: PathBuf::new(),
            model: ModelSettings::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(GkiError::InvalidConfig {
                reason: "learning_rate must be > 0".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(GkiError::InvalidConfig {
                reason: "batch_size must be >= 1".into(),
            });
        }
        if self.lambda_sim < 0.0 || self.rdrop_alpha < 0.0 {
            return Err(GkiError::InvalidConfig {
                reason: "lambda_sim and rdrop_alpha must be >= 0".into(),
            });
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainingConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| GkiError::io(path.display().to_string(), e))?;
        let config: TrainingConfig =
            toml::from_str(&text).map_err(|e| GkiError::InvalidConfig {
                reason: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    fn description_query_init(&self) -> bool {
        match self.query_init {
            QueryInit::Auto => self.knowledge_injection,
            QueryInit::Description => true,
            QueryInit::Random => false,
        }
    }
}

// ----------------------------- loss functions -------------------------------

/// Mean binary cross-entropy over codes with epsilon-clamped probabilities.
pub fn bce_loss(p: &[f64], y: &[u8]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(GkiError::ShapeMismatch {
            reason: format!("bce_loss: {} probs vs {} labels", p.len(), y.len()),
        });
    }
    let c = p.len() as f64;
    let mut loss = 0.0;
    for (pi, yi) in p.iter().zip(y.iter()) {
        let pc = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= *yi as f64 * pc.ln() + (1.0 - *yi as f64) * (1.0 - pc).ln();
    }
    Ok(loss / c)
}

/// Mean over positive codes of (1 - cosine(E_i, Ehat_i)); 0 with no positives.
pub fn similarity_loss(e: &Array2<f64>, e_hat: &Array2<f64>, y: &[u8]) -> f64 {
    assert_eq!(e.dim(), e_hat.dim());
    assert_eq!(e.nrows(), y.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &yi) in y.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        let a = e.row(i);
        let b = e_hat.row(i);
        let na = a.dot(&a).sqrt().max(NORM_EPS);
        let nb = b.dot(&b).sqrt().max(NORM_EPS);
        total += 1.0 - a.dot(&b) / (na * nb);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Halved symmetric KL between elementwise Bernoulli distributions, averaged
/// over codes.
pub fn rdrop_loss(p1: &[f64], p2: &[f64]) -> f64 {
    assert_eq!(p1.len(), p2.len());
    let c = p1.len() as f64;
    let mut total = 0.0;
    for (a, b) in p1.iter().zip(p2.iter()) {
        let a = a.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let b = b.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total += a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
        total += b * (b / a).ln() + (1.0 - b) * ((1.0 - b) / (1.0 - a)).ln();
    }
    total / (2.0 * c)
}

/// Linear warmup from 0 to `lr` over `[0, warmup]`, then linear decay to 0
/// at `total_steps`.
pub fn lr_schedule(step: usize, warmup_steps: usize, total_steps: usize, lr: f64) -> f64 {
    if warmup_steps > 0 && step <= warmup_steps {
        return lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let span = (total_steps - warmup_steps) as f64;
    lr * (total_steps - step) as f64 / span
}

// ----------------------------- optimizer ------------------------------------

pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &[Array2<f64>]) -> Adam {
        Adam {
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            azip_update(p, g, m, v, self.beta1, self.beta2, bc1, bc2, lr, self.eps);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    beta1: f64,
    beta2: f64,
    bc1: f64,
    bc2: f64,
    lr: f64,
    eps: f64,
) {
    ndarray::Zip::from(p)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        });
}

// ----------------------------- training step --------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub l_raw: f64,
    pub l_guide: f64,
    pub l_sim: f64,
    pub l_rdrop: f64,
    pub lr: f64,
    pub total: f64,
}

pub struct BatchItem<'a> {
    pub example: &'a EncodedExample,
    /// Tokenized guideline for this epoch, when knowledge injection is on and
    /// the sample has at least one positive code.
    pub guideline_tokens: Option<&'a [u32]>,
}

fn mix_seed(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut h = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(a)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .wrapping_add(b)
        .wrapping_mul(0x94d0_49bb_1331_11eb)
        .wrapping_add(c);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h
}

struct DocResult {
    l_raw: f64,
    l_guide: f64,
    l_sim: f64,
    l_rdrop: f64,
    total: f64,
    grads: Vec<Array2<f64>>,
}

fn doc_pass(
    model: &CodingModel,
    item: &BatchItem<'_>,
    config: &TrainingConfig,
    step: usize,
    doc_idx: usize,
) -> DocResult {
    let mut binding = model.bind();
    let labels = &item.example.labels;
    let targets = Array2::from_shape_fn((labels.len(), 1), |(i, _)| labels[i] as f64);
    let mask: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
    let dropout = model.config.dropout_rate > 0.0;

    let pass_rng = |pass: u64| {
        ChaCha8Rng::seed_from_u64(mix_seed(config.seed, step as u64, doc_idx as u64, pass))
    };

    let mut rng1 = pass_rng(1);
    let raw1 = binding.forward(
        &item.example.token_ids,
        dropout.then_some(&mut rng1),
    );
    let bce1 = binding.tape.bce(raw1.probs, targets.clone());

    let mut terms: Vec<(usize, f64)> = Vec::new();
    let (l_raw_id, l_rdrop_val, rdrop_term) = if config.rdrop_alpha > 0.0 {
        let mut rng2 = pass_rng(2);
        let raw2 = binding.forward(
            &item.example.token_ids,
            dropout.then_some(&mut rng2),
        );
        let bce2 = binding.tape.bce(raw2.probs, targets.clone());
        let l_raw = binding.tape.weighted_sum(&[(bce1, 0.5), (bce2, 0.5)]);
        let kl = binding.tape.sym_kl(raw1.probs, raw2.probs);
        (l_raw, binding.tape.scalar(kl), Some(kl))
    } else {
        (bce1, 0.0, None)
    };
    terms.push((l_raw_id, 1.0));
    if let Some(kl) = rdrop_term {
        terms.push((kl, config.rdrop_alpha));
    }

    let mut l_guide_val = 0.0;
    let mut l_sim_val = 0.0;
    if let Some(guide_tokens) = item.guideline_tokens {
        let mut rng3 = pass_rng(3);
        let guide = binding.forward(guide_tokens, dropout.then_some(&mut rng3));
        let bce_guide = binding.tape.bce(guide.probs, targets);
        let e_hat = if config.sim_stop_gradient {
            let value = binding.tape.value(guide.evidence).clone();
            binding.tape.constant(value)
        } else {
            guide.evidence
        };
        let sim = binding
            .tape
            .masked_cosine(raw1.evidence, e_hat, mask, config.sim_flattened);
        l_guide_val = binding.tape.scalar(bce_guide);
        l_sim_val = binding.tape.scalar(sim);
        terms.push((bce_guide, 1.0));
        terms.push((sim, config.lambda_sim));
    }

    let total = binding.tape.weighted_sum(&terms);
    let total_val = binding.tape.scalar(total);
    let grads = binding.param_grads(total);
    DocResult {
        l_raw: binding.tape.scalar(l_raw_id),
        l_guide: l_guide_val,
        l_sim: l_sim_val,
        l_rdrop: l_rdrop_val,
        total: total_val,
        grads,
    }
}

/// One optimizer step over a batch of raw samples and their guidelines.
pub fn train_step(
    model: &mut CodingModel,
    adam: &mut Adam,
    batch: &[BatchItem<'_>],
    config: &TrainingConfig,
    lr: f64,
    step: usize,
) -> Result<StepLosses> {
    assert!(!batch.is_empty());
    let results: Vec<DocResult> = batch
        .par_iter()
        .enumerate()
        .map(|(idx, item)| doc_pass(model, item, config, step, idx))
        .collect();

    let b = batch.len() as f64;
    let mut losses = StepLosses {
        step,
        l_raw: 0.0,
        l_guide: 0.0,
        l_sim: 0.0,
        l_rdrop: 0.0,
        lr,
        total: 0.0,
    };
    let mut grads: Vec<Array2<f64>> = model
        .params
        .values()
        .iter()
        .map(|p| Array2::zeros(p.raw_dim()))
        .collect();
    // fixed-order accumulation keeps results bit-identical across runs
    for r in &results {
        losses.l_raw += r.l_raw / b;
        losses.l_guide += r.l_guide / b;
        losses.l_sim += r.l_sim / b;
        losses.l_rdrop += r.l_rdrop / b;
        losses.total += r.total / b;
        for (acc, g) in grads.iter_mut().zip(r.grads.iter()) {
            ndarray::Zip::from(acc).and(g).for_each(|a, &g| *a += g / b);
        }
    }

    if !losses.total.is_finite() {
        return Err(GkiError::NonFiniteLoss {
            step,
            sample_ids: batch.iter().map(|i| i.example.id.clone()).collect(),
        });
    }
    adam.step(model.params.values_mut(), &grads, lr);
    Ok(losses)
}

// ----------------------------- evaluation -----------------------------------

/// Score every document in evaluation mode. Rows follow document order.
pub fn score_documents(
    model: &CodingModel,
    examples: &[EncodedExample],
) -> (Array2<f64>, Array2<u8>) {
    let c = model.config.num_codes;
    let rows: Vec<(Vec<f64>, Vec<u8>)> = examples
        .par_iter()
        .map(|ex| {
            let out = model.eval_forward(&ex.token_ids);
            (out.probs, ex.labels.clone())
        })
        .collect();
    let m = examples.len();
    let mut scores = Array2::zeros((m, c));
    let mut labels = Array2::zeros((m, c));
    for (i, (p, y)) in rows.into_iter().enumerate() {
        for j in 0..c {
            scores[(i, j)] = p[j];
            labels[(i, j)] = y[j];
        }
    }
    (scores, labels)
}

// ----------------------------- training loop --------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub dev_micro_f1: f64,
    pub dev_macro_f1: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub dev_report_path: PathBuf,
    pub best_epoch: usize,
    pub best_dev_micro_f1: f64,
    pub dev_report: MetricReport,
    pub step_losses: Vec<StepLosses>,
}

fn kb_texts(kb: &KnowledgeBase) -> Vec<String> {
    let mut texts = Vec::new();
    for code in kb.label_space() {
        let entry = kb.entry(code).expect("label space code");
        texts.push(entry.description.clone());
        texts.extend(entry.synonyms.iter().cloned());
        for level in &entry.hierarchy {
            texts.push(level.range_description.clone());
        }
    }
    texts
}

/// Full training run: builds the vocabulary and model, trains with per-epoch
/// guideline resampling, keeps the best-dev-micro-F1 parameters, and writes
/// checkpoint, loss log, per-epoch dev metrics, and the final dev report.
pub fn run_training(config: &TrainingConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| GkiError::io(out_dir.display().to_string(), e))?;

    let kb = KnowledgeBase::load(&config.kb_path)?;
    let train_docs = crate::corpus::load_corpus(&config.corpus_dir.join("train.jsonl"), &kb)?;
    let dev_docs = crate::corpus::load_corpus(&config.corpus_dir.join("dev.jsonl"), &kb)?;

    let kb_text_list = kb_texts(&kb);
    let vocab = Vocab::build(
        train_docs
            .iter()
            .map(|d| d.text.as_str())
            .chain(kb_text_list.iter().map(|s| s.as_str())),
    );

    let train_freqs = crate::corpus::code_frequencies(&train_docs, &kb)?;
    let model_config = config.model.to_model_config(kb.num_codes());
    let mut model = CodingModel::new(model_config, vocab.len(), config.seed)?;
    if config.description_query_init() {
        model.init_code_queries(&kb, &vocab)?;
    }

    let encode_all = |docs: &[Document]| -> Result<Vec<EncodedExample>> {
        docs.iter()
            .map(|d| crate::corpus::encode(d, &vocab, &kb, config.max_tokens))
            .collect()
    };
    let train_examples = encode_all(&train_docs)?;
    let dev_examples = encode_all(&dev_docs)?;

    let steps_per_epoch = train_examples.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * steps_per_epoch).max(1);

    let mut adam = Adam::new(model.params.values());
    let mut step = 0usize;
    let mut step_losses: Vec<StepLosses> = Vec::new();
    let mut epoch_records: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, Vec<Array2<f64>>)> = None;

    for epoch in 0..config.epochs {
        // fresh guidelines each epoch
        let guidelines: Vec<Option<Vec<u32>>> = if config.knowledge_injection {
            let opts = GuidelineOptions {
                use_synonyms: config.use_synonyms,
                use_hierarchy: config.use_hierarchy,
                segment_separator: "; ".to_string(),
                seed: config.seed,
            };
            train_examples
                .par_iter()
                .map(|ex| {
                    let codes = guideline::positive_codes(&ex.labels, &kb)?;
                    if codes.is_empty() {
                        return Ok(None);
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(guideline::guideline_seed(
                        config.seed,
                        &ex.id,
                        epoch,
                    ));
                    let g = guideline::synthesize_guideline(&codes, &kb, &opts, &mut rng)?;
                    let mut tokens = vocab.encode_text(&g.text);
                    tokens.truncate(config.max_tokens);
                    Ok(Some(tokens))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![None; train_examples.len()]
        };

        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        let mut order_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, 0, 0xF00D));
        order.shuffle(&mut order_rng);

        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    example: &train_examples[i],
                    guideline_tokens: guidelines[i].as_deref(),
                })
                .collect();
            let lr = lr_schedule(step, config.warmup_steps, total_steps, config.learning_rate);
            let losses = train_step(&mut model, &mut adam, &batch, config, lr, step)?;
            step_losses.push(losses);
            step += 1;
        }

        if !dev_examples.is_empty() {
            let (scores, labels) = score_documents(&model, &dev_examples);
            let (macro_f1, micro_f1) = metrics::f1_scores(&scores, &labels, config.threshold);
            epoch_records.push(EpochRecord {
                epoch,
                dev_micro_f1: micro_f1,
                dev_macro_f1: macro_f1,
            });
            let better = best.as_ref().map_or(true, |(b, _, _)| micro_f1 > *b);
            if better {
                best = Some((micro_f1, epoch, model.params.values().to_vec()));
            }
        }
    }

    if let Some((_, _, params)) = &best {
        for (slot, value) in model.params.values_mut().iter_mut().zip(params.iter()) {
            *slot = value.clone();
        }
    }
    let (best_dev_micro_f1, best_epoch) =
        best.as_ref().map_or((0.0, 0), |(f1, e, _)| (*f1, *e));

    let run_config = serde_json::to_value(config).expect("config serializes");
    let checkpoint = Checkpoint::from_model(
        &model,
        kb.label_space(),
        &vocab,
        train_freqs.clone(),
        Some(run_config),
    );
    let checkpoint_path = out_dir.join("checkpoint.json");
    checkpoint.save(&checkpoint_path)?;

    let loss_log_path = out_dir.join("loss_log.jsonl");
    let mut log = String::new();
    for l in &step_losses {
        log.push_str(&serde_json::to_string(l).expect("losses serialize"));
        log.push('\n');
    }
    fs::write(&loss_log_path, log)
        .map_err(|e| GkiError::io(loss_log_path.display().to_string(), e))?;

    let epoch_path = out_dir.join("dev_metrics.jsonl");
    let mut epoch_log = String::new();
    for r in &epoch_records {
        epoch_log.push_str(&serde_json::to_string(r).expect("record serializes"));
        epoch_log.push('\n');
    }
    fs::write(&epoch_path, epoch_log)
        .map_err(|e| GkiError::io(epoch_path.display().to_string(), e))?;

    let (scores, labels) = score_documents(&model, &dev_examples);
    let batch = EvalBatch {
        scores,
        labels,
        train_code_frequencies: train_freqs,
    };
    let dev_report = metrics::full_report(&batch, config.threshold);
    let dev_report_path = out_dir.join("dev_report.json");
    fs::write(
        &dev_report_path,
        serde_json::to_string_pretty(&dev_report).expect("report serializes"),
    )
    .map_err(|e| GkiError::io(dev_report_path.display().to_string(), e))?;

    Ok(TrainOutcome {
        checkpoint_path,
        loss_log_path,
        dev_report_path,
        best_epoch,
        best_dev_micro_f1,
        dev_report,
        step_losses,
    })
}
