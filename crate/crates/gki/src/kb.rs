//! Per-code knowledge: canonical descriptions, synonym sets, and hierarchy
//! ancestor chains, loaded from a pipe-delimited text table.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use once_cell::sync::Lazy;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{GkiError, Result};

static DIAGNOSIS_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^[0-9EV][0-9]{1,3}(\.[0-9]{1,2})?$").unwrap());
static PROCEDURE_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^[0-9]{2}(\.[0-9]{1,2})?$").unwrap());
static NOS_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)\bnos\b").unwrap());
static WS_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\s+").unwrap());
static SEP_RUN_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"([,;])(\s*[,;])+").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Diagnosis,
    Procedure,
}

/// An ICD-9 code. Two-digit stems are procedure codes, everything else
/// (three/four digit stems, E and V prefixes) is a diagnosis.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IcdCode {
    value: String,
    kind: CodeKind,
}

impl IcdCode {
    pub fn parse(raw: &str) -> Result<IcdCode> {
        let value = raw.trim().to_string();
        if value.is_empty() {
            return Err(GkiError::InvalidCode {
                value,
                reason: "empty".into(),
            });
        }
        let stem_len = value.split('.').next().unwrap_or("").len();
        let kind = if PROCEDURE_RE.is_match(&value) && stem_len == 2 {
            CodeKind::Procedure
        } else if DIAGNOSIS_RE.is_match(&value) {
            CodeKind::Diagnosis
        } else {
            return Err(GkiError::InvalidCode {
                value: value.clone(),
                reason: "does not match diagnosis or procedure pattern".into(),
            });
        };
        Ok(IcdCode { value, kind })
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }
}

impl fmt::Display for IcdCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyLevel {
    pub range_label: String,
    pub range_description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub code: IcdCode,
    /// Canonical description, NOS-stripped and lowercased.
    pub description: String,
    /// Always contains the canonical description; external synonyms follow.
    pub synonyms: Vec<String>,
    /// Ancestor chain from most general to most specific group.
    pub hierarchy: Vec<HierarchyLevel>,
}

/// Strip standalone "NOS" tokens (case-insensitive), collapse whitespace and
/// clean up separators left dangling by the removal.
pub fn normalize_description(text: &str) -> String {
    let s = NOS_RE.replace_all(text, "");
    let s = WS_RE.replace_all(&s, " ");
    let s = SEP_RUN_RE.replace_all(&s, "$1");
    let s = WS_RE.replace_all(&s, " ");
    s.trim()
        .trim_matches(|c: char| c == ',' || c == ';' || c == ' ')
        .to_string()
}

/// One uniformly-sampled synonym; the entry invariant guarantees a non-empty list.
pub fn sample_synonym<'a, R: Rng>(entry: &'a CodeEntry, rng: &mut R) -> &'a str {
    let idx = rng.gen_range(0..entry.synonyms.len());
    &entry.synonyms[idx]
}

/// Group descriptions in general-to-specific order.
pub fn hierarchy_descriptions(entry: &CodeEntry) -> Vec<&str> {
    entry
        .hierarchy
        .iter()
        .map(|h| h.range_description.as_str())
        .collect()
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    entries: HashMap<IcdCode, CodeEntry>,
    label_space: Vec<IcdCode>,
    index: HashMap<IcdCode, usize>,
}

impl KnowledgeBase {
    pub fn from_entries(entries: Vec<CodeEntry>) -> Result<KnowledgeBase> {
        let mut map = HashMap::new();
        let mut label_space = Vec::new();
        let mut index = HashMap::new();
        for entry in entries {
            let code = entry.code.clone();
            if map.contains_key(&code) {
                return Err(GkiError::DuplicateCode {
                    code: code.value().to_string(),
                });
            }
            index.insert(code.clone(), label_space.len());
            label_space.push(code.clone());
            map.insert(code, entry);
        }
        Ok(KnowledgeBase {
            entries: map,
            label_space,
            index,
        })
    }

    pub fn load(path: &Path) -> Result<KnowledgeBase> {
        let text = fs::read_to_string(path)
            .map_err(|e| GkiError::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<KnowledgeBase> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            entries.push(parse_row(line, lineno + 1)?);
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_table())
            .map_err(|e| GkiError::io(path.display().to_string(), e))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for code in &self.label_space {
            let e = &self.entries[code];
            let syns = e.synonyms.join(";");
            let hier = e
                .hierarchy
                .iter()
                .map(|h| format!("{}:{}", h.range_label, h.range_description))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{} | {} | {} | {}\n",
                code.value(),
                e.description,
                syns,
                hier
            ));
        }
        out
    }

    pub fn entry(&self, code: &IcdCode) -> Result<&CodeEntry> {
        self.entries.get(code).ok_or_else(|| GkiError::UnknownCode {
            code: code.value().to_string(),
            context: String::new(),
        })
    }

    pub fn index_of(&self, code: &IcdCode) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn label_space(&self) -> &[IcdCode] {
        &self.label_space
    }

    pub fn num_codes(&self) -> usize {
        self.label_space.len()
    }

    pub fn contains(&self, code: &IcdCode) -> bool {
        self.entries.contains_key(code)
    }
}

fn parse_row(line: &str, lineno: usize) -> Result<CodeEntry> {
    let cols: Vec<&str> = line.split('|').map(str::trim).collect();
    if cols.len() < 2 || cols.len() > 4 {
        return Err(GkiError::MalformedKbRow {
            line: lineno,
            reason: format!("expected 2-4 pipe-delimited columns, got {}", cols.len()),
        });
    }
    let code = IcdCode::parse(cols[0]).map_err(|e| GkiError::MalformedKbRow {
        line: lineno,
        reason: e.to_string(),
    })?;
    let description = normalize_description(cols[1]).to_lowercase();
    if description.is_empty() {
        return Err(GkiError::MalformedKbRow {
            line: lineno,
            reason: format!("code {} has an empty description", code.value()),
        });
    }
    let mut synonyms = vec![description.clone()];
    if let Some(raw) = cols.get(2) {
        for syn in raw.split(';') {
            let syn = WS_RE.replace_all(syn.trim(), " ").to_lowercase();
            if !syn.is_empty() && !synonyms.contains(&syn) {
                synonyms.push(syn);
            }
        }
    }
    let mut hierarchy = Vec::new();
    if let Some(raw) = cols.get(3) {
        for part in raw.split(';') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (label, desc) = part.split_once(':').ok_or_else(|| GkiError::MalformedKbRow {
                line: lineno,
                reason: format!("hierarchy entry {part:?} lacks a range:description colon"),
            })?;
            let label = label.trim().to_string();
            if hierarchy.iter().any(|h: &HierarchyLevel| h.range_label == label) {
                return Err(GkiError::MalformedKbRow {
                    line: lineno,
                    reason: format!("duplicate hierarchy range {label:?}"),
                });
            }
            hierarchy.push(HierarchyLevel {
                range_label: label,
                range_description: normalize_description(desc).to_lowercase(),
            });
        }
    }
    Ok(CodeEntry {
        code,
        description,
        synonyms,
        hierarchy,
    })
}
