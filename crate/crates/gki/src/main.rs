//! Operator surface: corpus generation, training, evaluation, guideline
//! dumping, and case-study attention inspection.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use gki::corpus::{self, SyntheticSpec};
use gki::guideline::{self, GuidelineOptions};
use gki::kb::KnowledgeBase;
use gki::metrics::{self, EvalBatch};
use gki::model::Checkpoint;
use gki::trainer::{self, TrainingConfig};

#[derive(Parser)]
#[command(name = "gki", about = "Knowledge-injection training for medical code assignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and knowledge base from a spec file.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus split and write a metric report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["dev", "test"])]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Dump per-sample guidelines for a corpus as JSONL.
    Synthesize {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show per-code attention evidence for one document.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 5)]
        top_m: usize,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    seed: u64,
    config: serde_json::Value,
    kb_path: Option<PathBuf>,
    corpus_paths: Vec<PathBuf>,
    checkpoint_path: Option<PathBuf>,
    report_path: Option<PathBuf>,
    started_at: String,
    finished_at: String,
    artifacts: Vec<PathBuf>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn env_seed_override(seed: u64) -> u64 {
    match std::env::var("GKI_SEED") {
        Ok(v) => v.parse().unwrap_or(seed),
        Err(_) => seed,
    }
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    for artifact in &manifest.artifacts {
        if !artifact.exists() {
            bail!("declared artifact {} was not written", artifact.display());
        }
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_generate(spec_path: &Path, out: &Path) -> Result<()> {
    let started = now();
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading spec {}", spec_path.display()))?;
    let mut spec: SyntheticSpec = toml::from_str(&text)
        .with_context(|| format!("parsing spec {}", spec_path.display()))?;
    spec.seed = env_seed_override(spec.seed);
    let (kb, train, dev, test) = generate(&spec)?;
    fs::create_dir_all(out)?;

    if train.is_empty() {
        eprintln!("warning: num_train is 0, writing an empty train split");
    }
    let kb_path = out.join("kb.txt");
    kb.save(&kb_path)?;
    let mut corpus_paths = Vec::new();
    for (name, docs) in [("train", &train), ("dev", &dev), ("test", &test)] {
        let path = out.join(format!("{name}.jsonl"));
        corpus::save_corpus(&path, docs)?;
        corpus_paths.push(path);
    }
    let mut artifacts = corpus_paths.clone();
    artifacts.push(kb_path.clone());
    write_manifest(
        out,
        &RunManifest {
            command: "generate".into(),
            seed: spec.seed,
            config: serde_json::to_value(&spec)?,
            kb_path: Some(kb_path),
            corpus_paths,
            checkpoint_path: None,
            report_path: None,
            started_at: started,
            finished_at: now(),
            artifacts,
        },
    )?;
    println!(
        "generated {} codes, {}/{}/{} train/dev/test documents in {}",
        spec.num_codes,
        train.len(),
        dev.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn generate(
    spec: &SyntheticSpec,
) -> Result<(
    KnowledgeBase,
    Vec<corpus::Document>,
    Vec<corpus::Document>,
    Vec<corpus::Document>,
)> {
    corpus::generate_synthetic_corpus(spec).map_err(Into::into)
}

fn cmd_train(config_path: &Path, out: &Path) -> Result<()> {
    let started = now();
    let mut config = TrainingConfig::load(config_path)?;
    config.seed = env_seed_override(config.seed);
    let outcome = trainer::run_training(&config, out)?;
    let artifacts = vec![
        outcome.checkpoint_path.clone(),
        outcome.loss_log_path.clone(),
        outcome.dev_report_path.clone(),
    ];
    write_manifest(
        out,
        &RunManifest {
            command: "train".into(),
            seed: config.seed,
            config: serde_json::to_value(&config)?,
            kb_path: Some(config.kb_path.clone()),
            corpus_paths: vec![
                config.corpus_dir.join("train.jsonl"),
                config.corpus_dir.join("dev.jsonl"),
            ],
            checkpoint_path: Some(outcome.checkpoint_path.clone()),
            report_path: Some(outcome.dev_report_path.clone()),
            started_at: started,
            finished_at: now(),
            artifacts,
        },
    )?;
    println!(
        "best dev micro-F1 {:.4} at epoch {}; checkpoint {}",
        outcome.best_dev_micro_f1,
        outcome.best_epoch,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn load_checkpoint_context(path: &Path) -> Result<(Checkpoint, TrainingConfig)> {
    let checkpoint = Checkpoint::load(path)?;
    let run_config = checkpoint
        .run_config
        .clone()
        .context("checkpoint has no embedded run config")?;
    let config: TrainingConfig =
        serde_json::from_value(run_config).context("parsing embedded run config")?;
    Ok((checkpoint, config))
}

fn cmd_evaluate(checkpoint_path: &Path, split: &str, report_path: &Path) -> Result<()> {
    let (checkpoint, config) = load_checkpoint_context(checkpoint_path)?;
    let model = checkpoint.to_model()?;
    let kb = KnowledgeBase::load(&config.kb_path)?;
    if kb.label_space() != checkpoint.label_space.as_slice() {
        bail!(
            "label-space mismatch: knowledge base at {} does not match the checkpoint",
            config.kb_path.display()
        );
    }
    let split_path = config.corpus_dir.join(format!("{split}.jsonl"));
    let docs = corpus::load_corpus(&split_path, &kb)?;
    let examples: Vec<_> = docs
        .iter()
        .map(|d| corpus::encode(d, &checkpoint.vocab, &kb, config.max_tokens))
        .collect::<gki::Result<_>>()?;
    let (scores, labels) = trainer::score_documents(&model, &examples);
    let batch = EvalBatch {
        scores,
        labels,
        train_code_frequencies: checkpoint.train_code_frequencies.clone(),
    };
    let report = metrics::full_report(&batch, config.threshold);
    fs::write(report_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!(
        "{split}: micro-F1 {:.4}, macro-F1 {:.4}, MAP {:.4} ({} documents)",
        report.micro_f1, report.macro_f1, report.map, report.num_documents
    );
    Ok(())
}

#[derive(Serialize)]
struct GuidelineRecord {
    id: String,
    codes: Vec<String>,
    guideline: String,
}

fn cmd_synthesize(corpus_path: &Path, kb_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let seed = env_seed_override(seed);
    let kb = KnowledgeBase::load(kb_path)?;
    let docs = corpus::load_corpus(corpus_path, &kb)?;
    let opts = GuidelineOptions {
        seed,
        ..Default::default()
    };
    let mut lines = String::new();
    for doc in &docs {
        let codes = doc.parsed_codes()?;
        let labels = corpus::multi_hot(&codes, &kb)?;
        let positive = guideline::positive_codes(&labels, &kb)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(guideline::guideline_seed(seed, &doc.id, 0));
        let g = guideline::synthesize_guideline(&positive, &kb, &opts, &mut rng)?;
        let record = GuidelineRecord {
            id: doc.id.clone(),
            codes: doc.codes.clone(),
            guideline: g.text,
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    fs::write(out, lines).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} guidelines to {}", docs.len(), out.display());
    Ok(())
}

fn find_document(config: &TrainingConfig, kb: &KnowledgeBase, id: &str) -> Result<corpus::Document> {
    for split in ["train", "dev", "test"] {
        let path = config.corpus_dir.join(format!("{split}.jsonl"));
        if !path.exists() {
            continue;
        }
        let docs = corpus::load_corpus(&path, kb)?;
        if let Some(doc) = docs.into_iter().find(|d| d.id == id) {
            return Ok(doc);
        }
    }
    bail!("unknown document id {id}")
}

fn cmd_inspect(checkpoint_path: &Path, id: &str, top_m: usize) -> Result<()> {
    let (checkpoint, config) = load_checkpoint_context(checkpoint_path)?;
    let model = checkpoint.to_model()?;
    let kb = KnowledgeBase::load(&config.kb_path)?;
    if kb.label_space() != checkpoint.label_space.as_slice() {
        bail!("label-space mismatch between checkpoint and knowledge base");
    }
    let doc = find_document(&config, &kb, id)?;
    let example = corpus::encode(&doc, &checkpoint.vocab, &kb, config.max_tokens)?;
    let out = model.eval_forward(&example.token_ids);
    let tokens: Vec<&str> = example
        .token_ids
        .iter()
        .map(|&t| checkpoint.vocab.token(t))
        .collect();

    println!("document {id} ({} tokens)", tokens.len());
    println!("gold codes: {}", doc.codes.join(", "));
    let mut any = false;
    for (i, code) in checkpoint.label_space.iter().enumerate() {
        let p = out.probs[i];
        if p < config.threshold {
            continue;
        }
        any = true;
        let weights = evidence_ranking(&out.attention, i, top_m);
        let rendered: Vec<String> = weights
            .iter()
            .map(|&(t, w)| format!("{}({:.3})", tokens[t], w))
            .collect();
        println!("{:>8}  p={:.3}  {}", code.value(), p, rendered.join(" "));
    }
    if !any {
        println!("no code predicted above threshold {}", config.threshold);
    }
    Ok(())
}

/// Top-m attended token positions for one code, ties broken by position.
fn evidence_ranking(attention: &ndarray::Array2<f64>, code: usize, top_m: usize) -> Vec<(usize, f64)> {
    let n = attention.ncols();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        attention[(code, b)]
            .partial_cmp(&attention[(code, a)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(top_m.min(n));
    idx.into_iter().map(|t| (t, attention[(code, t)])).collect()
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { spec, out } => cmd_generate(&spec, &out),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Evaluate {
            checkpoint,
            split,
            report,
        } => cmd_evaluate(&checkpoint, &split, &report),
        Command::Synthesize {
            corpus,
            kb,
            seed,
            out,
        } => cmd_synthesize(&corpus, &kb, seed, &out),
        Command::Inspect {
            checkpoint,
            id,
            top_m,
        } => cmd_inspect(&checkpoint, &id, top_m),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
