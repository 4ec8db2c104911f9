//! End-to-end acceptance suite. Each test prints one PASS/FAIL line.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gki::corpus::{self, SyntheticSpec};
use gki::guideline::{self, GuidelineOptions};
use gki::kb::{IcdCode, KnowledgeBase};
use gki::metrics::{self, EvalBatch, MetricReport};
use gki::model::{Checkpoint, CodingModel, EncoderKind, ModelConfig};
use gki::trainer::{self, ModelSettings, TrainingConfig};

fn report(name: &str, check: impl FnOnce() -> Result<(), String>) {
    match check() {
        Ok(()) => println!("ACCEPTANCE {name}: PASS"),
        Err(msg) => {
            println!("ACCEPTANCE {name}: FAIL ({msg})");
            panic!("{name}: {msg}");
        }
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ------------------------- metric oracles -----------------------------------

fn oracle_f1(scores: &Array2<f64>, labels: &Array2<u8>, threshold: f64) -> (f64, f64) {
    let (m, c) = scores.dim();
    let (mut tp_t, mut fp_t, mut fn_t) = (0.0, 0.0, 0.0);
    let mut macro_sum = 0.0;
    for j in 0..c {
        let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
        for i in 0..m {
            let pred = scores[(i, j)] >= threshold;
            let gold = labels[(i, j)] == 1;
            if pred && gold {
                tp += 1.0;
            } else if pred {
                fp += 1.0;
            } else if gold {
                fnn += 1.0;
            }
        }
        if 2.0 * tp + fp + fnn > 0.0 {
            macro_sum += 2.0 * tp / (2.0 * tp + fp + fnn);
        }
        tp_t += tp;
        fp_t += fp;
        fn_t += fnn;
    }
    let micro = if 2.0 * tp_t + fp_t + fn_t > 0.0 {
        2.0 * tp_t / (2.0 * tp_t + fp_t + fn_t)
    } else {
        0.0
    };
    (macro_sum / c as f64, micro)
}

/// Pairwise O(n^2) ROC-AUC, ties counted half.
fn oracle_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

fn oracle_macro_micro_auc(scores: &Array2<f64>, labels: &Array2<u8>) -> (Option<f64>, Option<f64>) {
    let (m, c) = scores.dim();
    let mut sum = 0.0;
    let mut count = 0;
    for j in 0..c {
        let s: Vec<f64> = (0..m).map(|i| scores[(i, j)]).collect();
        let y: Vec<u8> = (0..m).map(|i| labels[(i, j)]).collect();
        if let Some(a) = oracle_auc(&s, &y) {
            sum += a;
            count += 1;
        }
    }
    let flat_s: Vec<f64> = scores.iter().cloned().collect();
    let flat_y: Vec<u8> = labels.iter().cloned().collect();
    (
        (count > 0).then(|| sum / count as f64),
        oracle_auc(&flat_s, &flat_y),
    )
}

fn oracle_ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx
}

fn oracle_p_at_k(scores: &Array2<f64>, labels: &Array2<u8>, k: usize) -> f64 {
    let (m, _) = scores.dim();
    let mut total = 0.0;
    for i in 0..m {
        let row: Vec<f64> = scores.row(i).to_vec();
        let hits = oracle_ranking(&row)[..k]
            .iter()
            .filter(|&&j| labels[(i, j)] == 1)
            .count();
        total += hits as f64 / k as f64;
    }
    total / m as f64
}

fn oracle_map(scores: &Array2<f64>, labels: &Array2<u8>) -> f64 {
    let (m, _) = scores.dim();
    let mut total = 0.0;
    let mut docs = 0;
    for i in 0..m {
        let npos = labels.row(i).iter().filter(|&&y| y == 1).count();
        if npos == 0 {
            continue;
        }
        let row: Vec<f64> = scores.row(i).to_vec();
        let mut hits = 0.0;
        let mut ap = 0.0;
        for (rank, &j) in oracle_ranking(&row).iter().enumerate() {
            if labels[(i, j)] == 1 {
                hits += 1.0;
                ap += hits / (rank + 1) as f64;
            }
        }
        total += ap / npos as f64;
        docs += 1;
    }
    total / docs as f64
}

#[test]
fn metric_oracle_equivalence() {
    report("metric oracle equivalence", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(401);
        let (m, c) = (20, 30);
        for trial in 0..50 {
            let scores = Array2::from_shape_fn((m, c), |_| rng.gen::<f64>());
            let labels = Array2::from_shape_fn((m, c), |_| (rng.gen::<f64>() < 0.3) as u8);
            let tol = 1e-9;

            let (macro_f1, micro_f1) = metrics::f1_scores(&scores, &labels, 0.5);
            let (om_f1, oi_f1) = oracle_f1(&scores, &labels, 0.5);
            ensure((macro_f1 - om_f1).abs() < tol, format!("macro F1 trial {trial}"))?;
            ensure((micro_f1 - oi_f1).abs() < tol, format!("micro F1 trial {trial}"))?;

            let (macro_auc, micro_auc) = metrics::auc_scores(&scores, &labels);
            let (om_auc, oi_auc) = oracle_macro_micro_auc(&scores, &labels);
            match (macro_auc, om_auc) {
                (Some(a), Some(b)) => ensure((a - b).abs() < tol, format!("macro AUC trial {trial}"))?,
                (a, b) => ensure(a.is_none() && b.is_none(), "macro AUC validity")?,
            }
            ensure(
                (macro_auc.is_some() || om_auc.is_none())
                    && (micro_auc.unwrap() - oi_auc.unwrap()).abs() < tol,
                format!("micro AUC trial {trial}"),
            )?;

            for k in [1, 3, 5] {
                let got = metrics::precision_at_k(&scores, &labels, k);
                let want = oracle_p_at_k(&scores, &labels, k);
                ensure((got - want).abs() < tol, format!("P@{k} trial {trial}"))?;
            }

            let got = metrics::mean_average_precision(&scores, &labels);
            let want = oracle_map(&scores, &labels);
            ensure((got - want).abs() < tol, format!("MAP trial {trial}"))?;
        }
        ensure(start.elapsed().as_secs() < 10, "runtime >= 10 s")
    });
}

// ------------------------- loss correctness ---------------------------------

#[test]
fn loss_correctness() {
    report("loss correctness", || {
        let p = vec![0.5; 7];
        let y = vec![1, 0, 1, 1, 0, 0, 1];
        let bce = trainer::bce_loss(&p, &y).map_err(|e| e.to_string())?;
        ensure((bce - std::f64::consts::LN_2).abs() <= 1e-12, "bce(0.5) != ln 2")?;

        let mut rng = ChaCha8Rng::seed_from_u64(402);
        for trial in 0..1000 {
            let c = rng.gen_range(1..8);
            let d = rng.gen_range(1..10);
            let e = Array2::from_shape_fn((c, d), |_| rng.gen_range(-2.0..2.0));
            let e_hat = Array2::from_shape_fn((c, d), |_| rng.gen_range(-2.0..2.0));
            let y: Vec<u8> = (0..c).map(|_| (rng.gen::<f64>() < 0.5) as u8).collect();
            ensure(
                trainer::similarity_loss(&e, &e, &y).abs() < 1e-12,
                format!("sim(E,E) != 0, trial {trial}"),
            )?;
            let v = trainer::similarity_loss(&e, &e_hat, &y);
            ensure(
                (-1e-12..=2.0 + 1e-12).contains(&v),
                format!("sim out of [0,2], trial {trial}"),
            )?;
        }

        let p1 = vec![0.9, 0.2, 0.5];
        let p2 = vec![0.3, 0.8, 0.5];
        ensure(
            (trainer::rdrop_loss(&p1, &p2) - trainer::rdrop_loss(&p2, &p1)).abs() < 1e-12,
            "rdrop not symmetric",
        )?;
        ensure(trainer::rdrop_loss(&p1, &p1) == 0.0, "rdrop not zero at equality")?;

        // 100-step run; every logged step must decompose exactly.
        let losses = hundred_step_losses()?;
        ensure(losses.len() >= 100, format!("only {} steps logged", losses.len()))?;
        let (lambda, alpha) = (0.5, 2.0);
        for l in &losses {
            let recomposed = l.l_raw + l.l_guide + lambda * l.l_sim + alpha * l.l_rdrop;
            ensure(
                (l.total - recomposed).abs() < 1e-9,
                format!("decomposition fails at step {}", l.step),
            )?;
        }
        Ok(())
    });
}

fn hundred_step_losses() -> Result<Vec<trainer::StepLosses>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SyntheticSpec {
        num_codes: 10,
        num_train: 40,
        num_dev: 10,
        num_test: 10,
        vocab_size: 30,
        seed: 5,
        ..SyntheticSpec::reference(5)
    };
    let corpus_dir = write_corpus(&spec, dir.path())?;
    let config = TrainingConfig {
        epochs: 10,
        batch_size: 4,
        learning_rate: 1e-3,
        warmup_steps: 20,
        lambda_sim: 0.5,
        rdrop_alpha: 2.0,
        seed: 5,
        corpus_dir: corpus_dir.clone(),
        kb_path: corpus_dir.join("kb.txt"),
        model: small_model(),
        ..TrainingConfig::default()
    };
    let outcome =
        trainer::run_training(&config, &dir.path().join("run")).map_err(|e| e.to_string())?;
    Ok(outcome.step_losses)
}

// ------------------------- gradient check -----------------------------------

fn grad_fixture() -> (CodingModel, Vec<u32>, Vec<u32>, Array2<f64>, Vec<bool>) {
    let config = ModelConfig {
        hidden_dim: 8,
        chunk_size: 8,
        num_codes: 3,
        encoder: EncoderKind::TinyTransformer {
            layers: 1,
            heads: 2,
            ffn_dim: 16,
        },
        dropout_rate: 0.0,
        scale_attention: false,
    };
    let model = CodingModel::new(config, 12, 9).unwrap();
    let tokens = vec![3, 7, 1, 9, 4, 11];
    let guide = vec![5, 2, 8, 6];
    let labels = [1u8, 0, 1];
    let targets = Array2::from_shape_fn((3, 1), |(i, _)| labels[i] as f64);
    let mask = labels.iter().map(|&y| y == 1).collect();
    (model, tokens, guide, targets, mask)
}

fn grad_total_loss(
    model: &CodingModel,
    tokens: &[u32],
    guide: &[u32],
    targets: &Array2<f64>,
    mask: &[bool],
    with_grads: bool,
) -> (f64, Vec<Array2<f64>>) {
    let mut b = model.bind();
    let raw = b.forward(tokens, None);
    let bce = b.tape.bce(raw.probs, targets.clone());
    let guide_out = b.forward(guide, None);
    let bce_g = b.tape.bce(guide_out.probs, targets.clone());
    let sim = b
        .tape
        .masked_cosine(raw.evidence, guide_out.evidence, mask.to_vec(), false);
    let total = b.tape.weighted_sum(&[(bce, 1.0), (bce_g, 1.0), (sim, 0.7)]);
    let value = b.tape.scalar(total);
    let grads = if with_grads {
        b.param_grads(total)
    } else {
        Vec::new()
    };
    (value, grads)
}

#[test]
fn gradient_check() {
    report("gradient check", || {
        let start = Instant::now();
        let (model, tokens, guide, targets, mask) = grad_fixture();
        let (_, analytic) = grad_total_loss(&model, &tokens, &guide, &targets, &mask, true);
        let h = 1e-5;
        let names = model.params.names().to_vec();
        for (pi, name) in names.iter().enumerate() {
            let shape = model.params.values()[pi].raw_dim();
            for r in 0..shape[0] {
                for c in 0..shape[1] {
                    let mut plus = model.clone();
                    plus.params.values_mut()[pi][(r, c)] += h;
                    let (lp, _) = grad_total_loss(&plus, &tokens, &guide, &targets, &mask, false);
                    let mut minus = model.clone();
                    minus.params.values_mut()[pi][(r, c)] -= h;
                    let (lm, _) = grad_total_loss(&minus, &tokens, &guide, &targets, &mask, false);
                    let fd = (lp - lm) / (2.0 * h);
                    let an = analytic[pi][(r, c)];
                    let scale = an.abs().max(fd.abs());
                    if scale < 1e-7 {
                        continue;
                    }
                    ensure(
                        (an - fd).abs() / scale <= 1e-4,
                        format!("{name}[{r},{c}]: analytic {an:.3e} vs fd {fd:.3e}"),
                    )?;
                }
            }
        }
        ensure(start.elapsed().as_secs() < 60, "runtime >= 60 s")
    });
}

// ------------------------- guideline contract -------------------------------

#[test]
fn guideline_synthesis_contract() {
    report("guideline synthesis contract", || {
        let spec = SyntheticSpec {
            num_codes: 30,
            num_train: 1,
            num_dev: 1,
            num_test: 1,
            vocab_size: 40,
            ..SyntheticSpec::reference(3)
        };
        let (kb, _, _, _) = corpus::generate_synthetic_corpus(&spec).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let desc_opts = GuidelineOptions {
            use_synonyms: false,
            use_hierarchy: false,
            ..Default::default()
        };
        for trial in 0..1000 {
            let n = rng.gen_range(1..=5);
            let mut labels = vec![0u8; kb.num_codes()];
            for _ in 0..n {
                labels[rng.gen_range(0..kb.num_codes())] = 1;
            }
            let positive = guideline::positive_codes(&labels, &kb).map_err(|e| e.to_string())?;

            let full = GuidelineOptions::default();
            let mut r1 = ChaCha8Rng::seed_from_u64(trial);
            let mut r2 = ChaCha8Rng::seed_from_u64(trial + 9999);
            let g1 = guideline::synthesize_guideline(&positive, &kb, &full, &mut r1)
                .map_err(|e| e.to_string())?;
            let g2 = guideline::synthesize_guideline(&positive, &kb, &full, &mut r2)
                .map_err(|e| e.to_string())?;

            // exactly one segment per positive code, in both draws
            for g in [&g1, &g2] {
                let mut seen: Vec<&IcdCode> = g.segments.iter().map(|(c, _)| c).collect();
                seen.sort();
                let expected: Vec<&IcdCode> = positive.iter().collect();
                ensure(seen == expected, format!("segment codes drift, trial {trial}"))?;
            }

            // description-mode segments are invariant across seeds and equal
            // the positive codes' description multiset
            let d1 = guideline::synthesize_guideline(&positive, &kb, &desc_opts, &mut r1)
                .map_err(|e| e.to_string())?;
            let d2 = guideline::synthesize_guideline(&positive, &kb, &desc_opts, &mut r2)
                .map_err(|e| e.to_string())?;
            let multiset = |g: &guideline::Guideline| {
                let mut v: Vec<String> = g.segments.iter().map(|(_, s)| s.clone()).collect();
                v.sort();
                v
            };
            ensure(multiset(&d1) == multiset(&d2), format!("desc multiset varies, trial {trial}"))?;
            let mut descriptions: Vec<String> = positive
                .iter()
                .map(|c| kb.entry(c).unwrap().description.clone())
                .collect();
            descriptions.sort();
            ensure(
                multiset(&d1) == descriptions,
                format!("desc mode != description multiset, trial {trial}"),
            )?;
        }

        // 038.9 carries its two group descriptions verbatim
        let kb = KnowledgeBase::parse(
            "038.9 | Unspecified septicemia | | \
             001-139:Infectious And Parasitic Diseases;030-041:Other Bacterial Diseases\n",
        )
        .map_err(|e| e.to_string())?;
        let labels = vec![1u8];
        let positive = guideline::positive_codes(&labels, &kb).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = guideline::synthesize_guideline(&positive, &kb, &GuidelineOptions::default(), &mut rng)
            .map_err(|e| e.to_string())?;
        ensure(
            g.segments[0].1
                == "unspecified septicemia, infectious and parasitic diseases, other bacterial diseases",
            format!("038.9 segment was {:?}", g.segments[0].1),
        )
    });
}

// ------------------------- chunking -----------------------------------------

#[test]
fn chunking_correctness() {
    report("chunking correctness", || {
        let cs = 6;
        let config = ModelConfig {
            hidden_dim: 16,
            chunk_size: cs,
            num_codes: 4,
            encoder: EncoderKind::TinyTransformer {
                layers: 2,
                heads: 2,
                ffn_dim: 16,
            },
            dropout_rate: 0.0,
            scale_attention: false,
        };
        let model = CodingModel::new(config, 20, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(405);
        for n in [1, cs - 1, cs, cs + 1, 3 * cs + 7] {
            let tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(0..20)).collect();
            let h = model.eval_encode(&tokens);
            ensure(h.nrows() == n, format!("N={n}: {} rows", h.nrows()))?;
            // independent per-chunk encoding: each chunk runs as its own input
            let mut row = 0;
            for chunk in tokens.chunks(cs) {
                let hc = model.eval_encode(chunk);
                for i in 0..chunk.len() {
                    for d in 0..16 {
                        ensure(
                            (h[(row + i, d)] - hc[(i, d)]).abs() < 1e-6,
                            format!("N={n}: row {} differs from per-chunk encoding", row + i),
                        )?;
                    }
                }
                row += chunk.len();
            }
        }
        Ok(())
    });
}

// ------------------------- reference experiment -----------------------------

fn small_model() -> ModelSettings {
    ModelSettings {
        hidden_dim: 32,
        chunk_size: 64,
        layers: 1,
        heads: 2,
        ffn_dim: 32,
        ..Default::default()
    }
}

fn write_corpus(spec: &SyntheticSpec, dir: &std::path::Path) -> Result<PathBuf, String> {
    let (kb, train, dev, test) = corpus::generate_synthetic_corpus(spec).map_err(|e| e.to_string())?;
    let corpus_dir = dir.join("corpus");
    std::fs::create_dir_all(&corpus_dir).map_err(|e| e.to_string())?;
    kb.save(&corpus_dir.join("kb.txt")).map_err(|e| e.to_string())?;
    for (name, docs) in [("train", &train), ("dev", &dev), ("test", &test)] {
        corpus::save_corpus(&corpus_dir.join(format!("{name}.jsonl")), docs)
            .map_err(|e| e.to_string())?;
    }
    Ok(corpus_dir)
}

struct Experiment {
    _dir: tempfile::TempDir,
    corpus_dir: PathBuf,
    baseline_reports: Vec<MetricReport>,
    full_reports: Vec<MetricReport>,
    full_checkpoints: Vec<PathBuf>,
    elapsed_secs: u64,
}

fn reference_config(corpus_dir: &PathBuf, seed: u64, knowledge_injection: bool) -> TrainingConfig {
    TrainingConfig {
        learning_rate: 1e-3,
        epochs: 3,
        warmup_steps: 100,
        batch_size: 8,
        lambda_sim: 0.1,
        rdrop_alpha: 0.0,
        seed,
        knowledge_injection,
        corpus_dir: corpus_dir.clone(),
        kb_path: corpus_dir.join("kb.txt"),
        model: ModelSettings {
            hidden_dim: 64,
            chunk_size: 128,
            layers: 1,
            heads: 2,
            ffn_dim: 64,
            ..Default::default()
        },
        ..TrainingConfig::default()
    }
}

fn evaluate_test_split(checkpoint_path: &PathBuf, corpus_dir: &PathBuf) -> MetricReport {
    let ckpt = Checkpoint::load(checkpoint_path).unwrap();
    let model = ckpt.to_model().unwrap();
    let kb = KnowledgeBase::load(&corpus_dir.join("kb.txt")).unwrap();
    let docs = corpus::load_corpus(&corpus_dir.join("test.jsonl"), &kb).unwrap();
    let examples: Vec<_> = docs
        .iter()
        .map(|d| corpus::encode(d, &ckpt.vocab, &kb, corpus::DEFAULT_MAX_TOKENS).unwrap())
        .collect();
    let (scores, labels) = trainer::score_documents(&model, &examples);
    metrics::full_report(
        &EvalBatch {
            scores,
            labels,
            train_code_frequencies: ckpt.train_code_frequencies.clone(),
        },
        0.5,
    )
}

static EXPERIMENT: Lazy<Experiment> = Lazy::new(|| {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = write_corpus(&SyntheticSpec::reference(11), dir.path()).unwrap();
    let mut baseline_reports = Vec::new();
    let mut full_reports = Vec::new();
    let mut full_checkpoints = Vec::new();
    for seed in [1u64, 2, 3] {
        for knowledge_injection in [false, true] {
            let config = reference_config(&corpus_dir, seed, knowledge_injection);
            let out = dir
                .path()
                .join(format!("run-{seed}-{}", if knowledge_injection { "full" } else { "base" }));
            let outcome = trainer::run_training(&config, &out).unwrap();
            let report = evaluate_test_split(&outcome.checkpoint_path, &corpus_dir);
            if knowledge_injection {
                full_reports.push(report);
                full_checkpoints.push(outcome.checkpoint_path);
            } else {
                baseline_reports.push(report);
            }
        }
    }
    Experiment {
        _dir: dir,
        corpus_dir,
        baseline_reports,
        full_reports,
        full_checkpoints,
        elapsed_secs: start.elapsed().as_secs(),
    }
});

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn rare_f1(report: &MetricReport) -> f64 {
    report.bucket_f1.get("1-10").copied().unwrap_or(0.0)
}

#[test]
fn knowledge_injection_effect() {
    report("knowledge-injection effect", || {
        let exp = &*EXPERIMENT;
        let base_micro = median(exp.baseline_reports.iter().map(|r| r.micro_f1).collect());
        let full_micro = median(exp.full_reports.iter().map(|r| r.micro_f1).collect());
        let base_rare = median(exp.baseline_reports.iter().map(rare_f1).collect());
        let full_rare = median(exp.full_reports.iter().map(rare_f1).collect());
        println!(
            "  micro-F1 baseline {base_micro:.4} vs full {full_micro:.4}; \
             rare bucket {base_rare:.4} vs {full_rare:.4}"
        );
        ensure(
            full_micro >= base_micro,
            format!("median micro-F1 {full_micro:.4} < baseline {base_micro:.4}"),
        )?;
        ensure(
            full_rare - base_rare >= 0.05,
            format!("rare-bucket gain {:.4} < 0.05", full_rare - base_rare),
        )?;
        ensure(
            exp.elapsed_secs <= 30 * 60,
            format!("experiment took {} s", exp.elapsed_secs),
        )
    });
}

// ------------------------- schedule -----------------------------------------

#[test]
fn schedule_check() {
    report("schedule check", || {
        let (lr, warmup, total) = (5e-5, 2000, 12_000);
        ensure(trainer::lr_schedule(0, warmup, total, lr) == 0.0, "lr(0) != 0")?;
        ensure(
            trainer::lr_schedule(warmup, warmup, total, lr) == lr,
            "lr(warmup) != 5e-5",
        )?;
        ensure(
            trainer::lr_schedule(total, warmup, total, lr) == 0.0,
            "lr(total) != 0",
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(406);
        for _ in 0..100 {
            let step = rng.gen_range(0..=total);
            let want = if step <= warmup {
                lr * step as f64 / warmup as f64
            } else {
                lr * (total - step) as f64 / (total - warmup) as f64
            };
            let got = trainer::lr_schedule(step, warmup, total, lr);
            ensure(
                (got - want).abs() < 1e-18,
                format!("lr({step}) = {got:e}, want {want:e}"),
            )?;
        }
        Ok(())
    });
}

// ------------------------- determinism --------------------------------------

#[test]
fn determinism() {
    report("determinism", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let spec = SyntheticSpec {
            num_codes: 15,
            num_train: 48,
            num_dev: 16,
            num_test: 16,
            vocab_size: 40,
            ..SyntheticSpec::reference(21)
        };
        let corpus_dir = write_corpus(&spec, dir.path())?;
        let config = TrainingConfig {
            epochs: 2,
            learning_rate: 1e-3,
            warmup_steps: 6,
            seed: 21,
            corpus_dir: corpus_dir.clone(),
            kb_path: corpus_dir.join("kb.txt"),
            model: small_model(),
            ..TrainingConfig::default()
        };
        let a = trainer::run_training(&config, &dir.path().join("a")).map_err(|e| e.to_string())?;
        let b = trainer::run_training(&config, &dir.path().join("b")).map_err(|e| e.to_string())?;
        let bytes_a = std::fs::read(&a.dev_report_path).map_err(|e| e.to_string())?;
        let bytes_b = std::fs::read(&b.dev_report_path).map_err(|e| e.to_string())?;
        ensure(bytes_a == bytes_b, "metric reports differ byte-for-byte")?;
        let ck_a = std::fs::read(&a.checkpoint_path).map_err(|e| e.to_string())?;
        let ck_b = std::fs::read(&b.checkpoint_path).map_err(|e| e.to_string())?;
        ensure(ck_a == ck_b, "checkpoints differ byte-for-byte")
    });
}

// ------------------------- evidence localization ----------------------------

#[test]
fn evidence_localization() {
    report("evidence localization", || {
        let exp = &*EXPERIMENT;
        // the full run with median test micro-F1
        let mut order: Vec<usize> = (0..exp.full_reports.len()).collect();
        order.sort_by(|&a, &b| {
            exp.full_reports[a]
                .micro_f1
                .partial_cmp(&exp.full_reports[b].micro_f1)
                .unwrap()
        });
        let ckpt = Checkpoint::load(&exp.full_checkpoints[order[1]]).unwrap();
        let model = ckpt.to_model().unwrap();
        let kb = KnowledgeBase::load(&exp.corpus_dir.join("kb.txt")).unwrap();
        let docs = corpus::load_corpus(&exp.corpus_dir.join("test.jsonl"), &kb).unwrap();

        let mut cases = Vec::new();
        'outer: for doc in &docs {
            for code in doc.parsed_codes().unwrap() {
                let idx = kb.index_of(&code).unwrap();
                let freq = ckpt.train_code_frequencies[idx];
                if (1..=10).contains(&freq) {
                    cases.push((doc, idx));
                    if cases.len() == 20 {
                        break 'outer;
                    }
                }
            }
        }
        ensure(cases.len() == 20, format!("only {} rare-code cases found", cases.len()))?;

        let mut hits = 0;
        for (doc, idx) in &cases {
            let example = corpus::encode(doc, &ckpt.vocab, &kb, corpus::DEFAULT_MAX_TOKENS).unwrap();
            let out = model.eval_forward(&example.token_ids);
            let tokens: Vec<&str> = example
                .token_ids
                .iter()
                .map(|&t| ckpt.vocab.token(t))
                .collect();
            // evidence sentence: the unique cond token through the next period
            let marker = corpus::evidence_token(*idx);
            let start = tokens.iter().position(|&t| t == marker).unwrap();
            let end = (start..tokens.len())
                .find(|&p| tokens[p] == ".")
                .unwrap_or(tokens.len() - 1);
            let top1 = (0..tokens.len())
                .max_by(|&a, &b| {
                    out.attention[(*idx, a)]
                        .partial_cmp(&out.attention[(*idx, b)])
                        .unwrap()
                })
                .unwrap();
            if (start..=end).contains(&top1) {
                hits += 1;
            }
        }
        println!("  top-1 attention inside evidence sentence: {hits}/20");
        ensure(hits >= 15, format!("only {hits}/20 localized"))
    });
}
