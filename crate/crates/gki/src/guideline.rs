//! Guideline synthesis: build a knowledge-bearing text from the positive code
//! set of a sample by concatenating shuffled per-code segments.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GkiError, Result};
use crate::kb::{hierarchy_descriptions, sample_synonym, IcdCode, KnowledgeBase};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidelineOptions {
    pub use_synonyms: bool,
    pub use_hierarchy: bool,
    pub segment_separator: String,
    pub seed: u64,
}

impl Default for GuidelineOptions {
    fn default() -> Self {
        GuidelineOptions {
            use_synonyms: true,
            use_hierarchy: true,
            segment_separator: "; ".to_string(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Guideline {
    pub text: String,
    pub segments: Vec<(IcdCode, String)>,
    pub source_codes: BTreeSet<IcdCode>,
}

/// Codes whose label bit is set.
pub fn positive_codes(labels: &[u8], kb: &KnowledgeBase) -> Result<BTreeSet<IcdCode>> {
    if labels.len() != kb.num_codes() {
        return Err(GkiError::LabelLengthMismatch {
            got: labels.len(),
            expected: kb.num_codes(),
        });
    }
    let mut out = BTreeSet::new();
    for (i, &y) in labels.iter().enumerate() {
        match y {
            0 => {}
            1 => {
                out.insert(kb.label_space()[i].clone());
            }
            other => {
                return Err(GkiError::ShapeMismatch {
                    reason: format!("label entry {other} at index {i} is not binary"),
                })
            }
        }
    }
    Ok(out)
}

/// Synthesize the guideline for one positive code set. Per code the segment is
/// a sampled synonym (or the canonical description) followed, when enabled, by
/// the hierarchy group descriptions general-to-specific. Segments are shuffled
/// before concatenation.
pub fn synthesize_guideline<R: Rng>(
    codes: &BTreeSet<IcdCode>,
    kb: &KnowledgeBase,
    opts: &GuidelineOptions,
    rng: &mut R,
) -> Result<Guideline> {
    // Iterate in label-space order so rng consumption does not depend on set
    // representation.
    let mut ordered: Vec<&IcdCode> = codes.iter().collect();
    ordered.sort_by_key(|c| kb.index_of(c));
    for code in &ordered {
        if !kb.contains(code) {
            return Err(GkiError::UnknownCode {
                code: code.value().to_string(),
                context: " while synthesizing guideline".to_string(),
            });
        }
    }

    let mut segments: Vec<(IcdCode, String)> = Vec::with_capacity(ordered.len());
    for code in ordered {
        let entry = kb.entry(code)?;
        let base = if opts.use_synonyms {
            sample_synonym(entry, rng).to_string()
        } else {
            entry.description.clone()
        };
        let segment = if opts.use_hierarchy {
            let mut parts = vec![base];
            parts.extend(hierarchy_descriptions(entry).iter().map(|s| s.to_string()));
            parts.join(", ")
        } else {
            base
        };
        segments.push((code.clone(), segment));
    }
    segments.shuffle(rng);

    let text = segments
        .iter()
        .map(|(_, s)| s.as_str())
        .collect::<Vec<_>>()
        .join(&opts.segment_separator);
    Ok(Guideline {
        text,
        segments,
        source_codes: codes.clone(),
    })
}

/// Per-sample guideline seed: mixes the global seed with the sample id and
/// epoch so resampling differs across epochs but stays reproducible.
pub fn guideline_seed(global_seed: u64, sample_id: &str, epoch: usize) -> u64 {
    let mut h = global_seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in sample_id.as_bytes() {
        h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(*b as u64);
    }
    h = h.wrapping_add(epoch as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 31;
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_kb() -> KnowledgeBase {
        KnowledgeBase::parse(
            "401.9 | unspecified essential hypertension | primary hypertension; hypertension nos | 401-405:hypertensive disease\n\
             038.9 | unspecified septicemia | | 001-139:infectious and parasitic diseases;030-041:other bacterial diseases\n\
             250.00 | diabetes mellitus type ii | |\n",
        )
        .unwrap()
    }

    fn codes(kb: &KnowledgeBase, values: &[&str]) -> BTreeSet<IcdCode> {
        values
            .iter()
            .map(|v| IcdCode::parse(v).unwrap())
            .inspect(|c| assert!(kb.contains(c)))
            .collect()
    }

    #[test]
    fn positive_codes_examples() {
        let kb = toy_kb();
        assert!(positive_codes(&[0, 0, 0], &kb).unwrap().is_empty());
        let set = positive_codes(&[1, 0, 1], &kb).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.contains(&IcdCode::parse("401.9").unwrap()));
        assert!(set.contains(&IcdCode::parse("250.00").unwrap()));
        assert!(positive_codes(&[1, 0], &kb).is_err());
    }

    #[test]
    fn empty_set_yields_empty_guideline() {
        let kb = toy_kb();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = synthesize_guideline(
            &BTreeSet::new(),
            &kb,
            &GuidelineOptions::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(g.text, "");
        assert!(g.segments.is_empty());
    }

    #[test]
    fn description_only_mode() {
        let kb = toy_kb();
        let opts = GuidelineOptions {
            use_synonyms: false,
            use_hierarchy: false,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = synthesize_guideline(&codes(&kb, &["401.9"]), &kb, &opts, &mut rng).unwrap();
        assert_eq!(g.text, "unspecified essential hypertension");
    }

    #[test]
    fn hierarchy_segment_matches_book_order() {
        let kb = toy_kb();
        let opts = GuidelineOptions {
            use_synonyms: false,
            use_hierarchy: true,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = synthesize_guideline(&codes(&kb, &["038.9"]), &kb, &opts, &mut rng).unwrap();
        assert_eq!(
            g.text,
            "unspecified septicemia, infectious and parasitic diseases, other bacterial diseases"
        );
    }

    #[test]
    fn segment_multiset_invariant_across_seeds() {
        let kb = toy_kb();
        let opts = GuidelineOptions {
            use_synonyms: false,
            use_hierarchy: true,
            ..Default::default()
        };
        let set = codes(&kb, &["401.9", "038.9", "250.00"]);
        let texts = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = synthesize_guideline(&set, &kb, &opts, &mut rng).unwrap();
            let mut v: Vec<String> = g.segments.into_iter().map(|(_, s)| s).collect();
            v.sort();
            v
        };
        assert_eq!(texts(1), texts(99));
    }

    #[test]
    fn deterministic_given_seed() {
        let kb = toy_kb();
        let opts = GuidelineOptions::default();
        let set = codes(&kb, &["401.9", "038.9", "250.00"]);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            synthesize_guideline(&set, &kb, &opts, &mut rng).unwrap().text
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn unknown_code_named_in_error() {
        let kb = toy_kb();
        let mut set = BTreeSet::new();
        set.insert(IcdCode::parse("999.99").unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err =
            synthesize_guideline(&set, &kb, &GuidelineOptions::default(), &mut rng).unwrap_err();
        assert!(err.to_string().contains("999.99"));
    }
}
