//! Corpus ingestion, tokenization, multi-hot encoding, and the synthetic
//! long-tail corpus generator used for desk-scale experiments.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GkiError, Result};
use crate::kb::{CodeEntry, HierarchyLevel, IcdCode, KnowledgeBase};

pub const DEFAULT_MAX_TOKENS: usize = 8192;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub codes: Vec<String>,
}

impl Document {
    pub fn parsed_codes(&self) -> Result<Vec<IcdCode>> {
        self.codes.iter().map(|c| IcdCode::parse(c)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub id: String,
    pub token_ids: Vec<u32>,
    pub labels: Vec<u8>,
}

/// Whitespace word-level vocabulary with an OOV token at index 0.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Vocab::from_tokens(Vec::<String>::deserialize(d)?))
    }
}

pub const UNK_TOKEN: &str = "<unk>";

impl Vocab {
    /// Build from an iterator of texts; token ids follow first occurrence.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>) -> Vocab {
        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(UNK_TOKEN.to_string(), 0u32);
        for text in texts {
            for tok in tokenize(text) {
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), tokens.len() as u32);
                    tokens.push(tok);
                }
            }
        }
        Vocab { tokens, index }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize(text).map(|t| self.id_of(&t)).collect()
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| t.to_lowercase())
}

pub fn multi_hot(codes: &[IcdCode], kb: &KnowledgeBase) -> Result<Vec<u8>> {
    let mut labels = vec![0u8; kb.num_codes()];
    for code in codes {
        let idx = kb.index_of(code).ok_or_else(|| GkiError::UnknownCode {
            code: code.value().to_string(),
            context: String::new(),
        })?;
        labels[idx] = 1;
    }
    Ok(labels)
}

/// Tokenize, head-truncate to `max_tokens`, and attach the multi-hot labels.
pub fn encode(
    document: &Document,
    vocab: &Vocab,
    kb: &KnowledgeBase,
    max_tokens: usize,
) -> Result<EncodedExample> {
    let mut token_ids = vocab.encode_text(&document.text);
    if token_ids.is_empty() {
        return Err(GkiError::EmptyDocument {
            id: document.id.clone(),
        });
    }
    token_ids.truncate(max_tokens);
    let labels = multi_hot(&document.parsed_codes()?, kb)?;
    Ok(EncodedExample {
        id: document.id.clone(),
        token_ids,
        labels,
    })
}

pub fn load_corpus(path: &Path, kb: &KnowledgeBase) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path)
        .map_err(|e| GkiError::io(path.display().to_string(), e))?;
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(line).map_err(|e| GkiError::MalformedCorpusLine {
                path: path.display().to_string(),
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        if !seen.insert(doc.id.clone()) {
            return Err(GkiError::DuplicateDocumentId { id: doc.id });
        }
        for code in doc.parsed_codes()? {
            if !kb.contains(&code) {
                return Err(GkiError::UnknownCode {
                    code: code.value().to_string(),
                    context: format!(" in document {:?}", doc.id),
                });
            }
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn save_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(doc).expect("document serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| GkiError::io(path.display().to_string(), e))
}

/// Unspecified fields fall back to the reference configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_codes: usize,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    pub zipf_exponent: f64,
    pub codes_per_doc: (usize, usize),
    pub noise_sentences_per_doc: (usize, usize),
    pub synonyms_per_code: usize,
    pub hierarchy_depth: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec::reference(0)
    }
}

impl SyntheticSpec {
    /// The desk-scale reference configuration: 100 codes, Zipf 1.2,
    /// 2000/200/400 split.
    pub fn reference(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_codes: 100,
            num_train: 2000,
            num_dev: 200,
            num_test: 400,
            zipf_exponent: 1.2,
            codes_per_doc: (1, 3),
            noise_sentences_per_doc: (2, 5),
            synonyms_per_code: 3,
            hierarchy_depth: 2,
            vocab_size: 120,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_codes == 0 {
            return Err(GkiError::InvalidSpec {
                reason: "num_codes must be positive".into(),
            });
        }
        if self.zipf_exponent <= 0.0 {
            return Err(GkiError::InvalidSpec {
                reason: "zipf_exponent must be > 0".into(),
            });
        }
        if self.vocab_size == 0 {
            return Err(GkiError::InvalidSpec {
                reason: "vocab_size must be positive".into(),
            });
        }
        if self.codes_per_doc.0 > self.codes_per_doc.1 {
            return Err(GkiError::InvalidSpec {
                reason: "codes_per_doc min exceeds max".into(),
            });
        }
        if self.codes_per_doc.0 == 0 {
            return Err(GkiError::InvalidSpec {
                reason: "codes_per_doc min must be positive".into(),
            });
        }
        if self.codes_per_doc.1 > self.num_codes {
            return Err(GkiError::InvalidSpec {
                reason: "codes_per_doc max exceeds num_codes".into(),
            });
        }
        if self.noise_sentences_per_doc.0 > self.noise_sentences_per_doc.1 {
            return Err(GkiError::InvalidSpec {
                reason: "noise_sentences_per_doc min exceeds max".into(),
            });
        }
        Ok(())
    }
}

fn code_value(i: usize) -> String {
    format!("{:03}.{}", i / 10, i % 10)
}

/// The unique evidence token of code `i`. Every synthetic synonym of code `i`
/// starts with this token, so its positions mark the evidence sentence.
pub fn evidence_token(i: usize) -> String {
    format!("cond{i}")
}

fn build_toy_kb(spec: &SyntheticSpec) -> KnowledgeBase {
    let mut entries = Vec::with_capacity(spec.num_codes);
    for i in 0..spec.num_codes {
        let code = IcdCode::parse(&code_value(i)).expect("generated code is valid");
        let description = format!("{} disorder", evidence_token(i));
        let mut synonyms = vec![description.clone()];
        for j in 1..spec.synonyms_per_code {
            synonyms.push(format!("{} variant{j}", evidence_token(i)));
        }
        let mut hierarchy = Vec::new();
        for level in 0..spec.hierarchy_depth {
            let group_size = (spec.num_codes >> (level + 1)).max(1);
            let group = i / group_size;
            let lo = group * group_size;
            let hi = (lo + group_size - 1).min(spec.num_codes - 1);
            hierarchy.push(HierarchyLevel {
                range_label: format!("{}-{}", code_value(lo), code_value(hi)),
                range_description: format!("group{level}g{group} family"),
            });
        }
        entries.push(CodeEntry {
            code,
            description,
            synonyms,
            hierarchy,
        });
    }
    KnowledgeBase::from_entries(entries).expect("generated codes are unique")
}

/// Sample `count` distinct code indices with Zipf(s) marginal weights.
fn sample_codes<R: Rng>(spec: &SyntheticSpec, rng: &mut R, count: usize) -> Vec<usize> {
    let mut weights: Vec<f64> = (0..spec.num_codes)
        .map(|i| 1.0 / ((i + 1) as f64).powf(spec.zipf_exponent))
        .collect();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = 0;
        for (i, w) in weights.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            u -= w;
            if u <= 0.0 {
                pick = i;
                break;
            }
            pick = i;
        }
        chosen.push(pick);
        weights[pick] = 0.0;
    }
    chosen
}

fn generate_split(
    spec: &SyntheticSpec,
    kb: &KnowledgeBase,
    split: &str,
    count: usize,
    salt: u64,
) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(salt));
    let mut docs = Vec::with_capacity(count);
    for d in 0..count {
        let n_codes = rng.gen_range(spec.codes_per_doc.0..=spec.codes_per_doc.1);
        let code_indices = sample_codes(spec, &mut rng, n_codes);
        let mut sentences: Vec<String> = Vec::new();
        for &ci in &code_indices {
            let entry = kb.entry(&kb.label_space()[ci]).expect("generated code");
            let syn = crate::kb::sample_synonym(entry, &mut rng);
            sentences.push(format!("{syn} ."));
        }
        let n_noise =
            rng.gen_range(spec.noise_sentences_per_doc.0..=spec.noise_sentences_per_doc.1);
        for _ in 0..n_noise {
            let len = rng.gen_range(4..=8);
            let words: Vec<String> = (0..len)
                .map(|_| format!("noise{}", rng.gen_range(0..spec.vocab_size)))
                .collect();
            sentences.push(format!("{} .", words.join(" ")));
        }
        sentences.shuffle(&mut rng);
        let codes: Vec<String> = code_indices
            .iter()
            .map(|&ci| kb.label_space()[ci].value().to_string())
            .collect();
        docs.push(Document {
            id: format!("{split}-{d:05}"),
            text: sentences.join(" "),
            codes,
        });
    }
    docs
}

/// Generate the toy ontology plus train/dev/test splits. Deterministic given
/// the spec seed; evidence vocabulary (cond*/variant*/group* tokens) is
/// disjoint from the noise vocabulary by construction.
pub fn generate_synthetic_corpus(
    spec: &SyntheticSpec,
) -> Result<(KnowledgeBase, Vec<Document>, Vec<Document>, Vec<Document>)> {
    spec.validate()?;
    let kb = build_toy_kb(spec);
    let train = generate_split(spec, &kb, "train", spec.num_train, 0x7261_696e);
    let dev = generate_split(spec, &kb, "dev", spec.num_dev, 0x6465_7600);
    let test = generate_split(spec, &kb, "test", spec.num_test, 0x7465_7374);
    Ok((kb, train, dev, test))
}

/// Per-code occurrence counts over a document list, aligned with the label space.
pub fn code_frequencies(docs: &[Document], kb: &KnowledgeBase) -> Result<Vec<usize>> {
    let mut freqs = vec![0usize; kb.num_codes()];
    for doc in docs {
        for code in doc.parsed_codes()? {
            let idx = kb.index_of(&code).ok_or_else(|| GkiError::UnknownCode {
                code: code.value().to_string(),
                context: format!(" in document {:?}", doc.id),
            })?;
            freqs[idx] += 1;
        }
    }
    Ok(freqs)
}
