//! Shared domain types and the pure primitives every stage builds on.

use std::collections::HashSet;
use std::fmt;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Vocabulary;

/// Default CLIP context length; captions must fit inside it.
pub const DEFAULT_TOKEN_LIMIT: usize = 77;
/// Upper bound on distractors stored with a triplet.
pub const DEFAULT_MAX_DISTRACTORS: usize = 5;

/// Inflections of the verbs that describe sameness rather than a change.
pub const FORBIDDEN_VERB_FORMS: [&str; 8] = [
    "maintain",
    "maintains",
    "maintained",
    "maintaining",
    "ensure",
    "ensures",
    "ensured",
    "ensuring",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    #[serde(rename = "id")]
    pub image_id: String,
    #[serde(rename = "vec")]
    pub vector: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub label: String,
    pub descriptors: Vec<String>,
}

impl ObjectEntry {
    pub fn is_well_formed(&self) -> bool {
        !self.label.trim().is_empty()
            && !self.descriptors.is_empty()
            && self.descriptors.iter().all(|d| !d.trim().is_empty())
    }
}

/// Objects found in one image, most prominent first. Labels may repeat.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ObjectInventory {
    pub image_id: String,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub pair_id: String,
    pub query: ImageRef,
    pub target: ImageRef,
    #[serde(rename = "emb_sim")]
    pub emb_similarity: f64,
    #[serde(rename = "hash_dist")]
    pub hash_distance: u32,
}

/// Deterministic pair identifier, `<query_id>__<target_id>`.
pub fn pair_id(query_id: &str, target_id: &str) -> String {
    format!("{query_id}__{target_id}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionKind {
    Atomic,
    Compound2,
    Compound3,
}

impl CaptionKind {
    pub fn arity(self) -> usize {
        match self {
            CaptionKind::Atomic => 1,
            CaptionKind::Compound2 => 2,
            CaptionKind::Compound3 => 3,
        }
    }

    pub fn for_arity(n: usize) -> Option<Self> {
        match n {
            1 => Some(CaptionKind::Atomic),
            2 => Some(CaptionKind::Compound2),
            3 => Some(CaptionKind::Compound3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub kind: CaptionKind,
    pub source_indices: Vec<usize>,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CirTriplet {
    pub pair_id: String,
    pub query_id: String,
    pub target_id: String,
    pub caption: Caption,
    #[serde(default)]
    pub distractor_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SimilarityError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("non-finite component")]
    NonFinite,
}

/// Cosine similarity in double precision, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::DimensionMismatch(a.len(), b.len()));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if !(dot.is_finite() && na.is_finite() && nb.is_finite()) {
        return Err(SimilarityError::NonFinite);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn forbidden_verb_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let alternation = FORBIDDEN_VERB_FORMS.join("|");
        Regex::new(&format!(r"(?i)\b(?:{alternation})\b")).expect("static pattern")
    })
}

/// Whole-word, case-insensitive check for the forbidden verb family.
pub fn contains_forbidden_verb(text: &str) -> bool {
    forbidden_verb_regex().is_match(text)
}

/// Rule names reported by [`validate_triplet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    EmptyText,
    ForbiddenVerb,
    TokenBudget,
    TokenCountMismatch,
    ZeroTokenCount,
    KindArity,
    DuplicateSourceIndex,
    SelfPair,
    PairIdMismatch,
    DistractorIsQuery,
    DistractorIsTarget,
    DuplicateDistractor,
    TooManyDistractors,
}

impl Violation {
    pub fn code(self) -> &'static str {
        match self {
            Violation::EmptyText => "empty_text",
            Violation::ForbiddenVerb => "forbidden_verb",
            Violation::TokenBudget => "token_budget",
            Violation::TokenCountMismatch => "token_count_mismatch",
            Violation::ZeroTokenCount => "zero_token_count",
            Violation::KindArity => "kind_arity",
            Violation::DuplicateSourceIndex => "duplicate_source_index",
            Violation::SelfPair => "self_pair",
            Violation::PairIdMismatch => "pair_id_mismatch",
            Violation::DistractorIsQuery => "distractor_is_query",
            Violation::DistractorIsTarget => "distractor_is_target",
            Violation::DuplicateDistractor => "duplicate_distractor",
            Violation::TooManyDistractors => "too_many_distractors",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone)]
pub struct ValidationConfig {
    pub token_limit: usize,
    pub max_distractors: usize,
    /// When set, token counts are recomputed and must match the stored value.
    pub recount: Option<Arc<Vocabulary>>,
    pub count_special_tokens: bool,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            token_limit: DEFAULT_TOKEN_LIMIT,
            max_distractors: DEFAULT_MAX_DISTRACTORS,
            recount: None,
            count_special_tokens: true,
        }
    }
}

impl fmt::Debug for ValidationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ValidationConfig")
            .field("token_limit", &self.token_limit)
            .field("max_distractors", &self.max_distractors)
            .field("recount", &self.recount.is_some())
            .field("count_special_tokens", &self.count_special_tokens)
            .finish()
    }
}

/// Checks every caption and triplet invariant; an empty list means valid.
pub fn validate_triplet(t: &CirTriplet, cfg: &ValidationConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let cap = &t.caption;

    if cap.text.trim().is_empty() {
        out.push(Violation::EmptyText);
    }
    if contains_forbidden_verb(&cap.text) {
        out.push(Violation::ForbiddenVerb);
    }
    if cap.token_count == 0 {
        out.push(Violation::ZeroTokenCount);
    }
    if cap.token_count > cfg.token_limit {
        out.push(Violation::TokenBudget);
    }
    if let Some(vocab) = &cfg.recount {
        let n = vocab.budget_count(&cap.text, cfg.count_special_tokens);
        if n != cap.token_count {
            out.push(Violation::TokenCountMismatch);
        }
        if n > cfg.token_limit && cap.token_count <= cfg.token_limit {
            out.push(Violation::TokenBudget);
        }
    }
    if cap.source_indices.len() != cap.kind.arity() {
        out.push(Violation::KindArity);
    }
    let mut seen = HashSet::new();
    if !cap.source_indices.iter().all(|i| seen.insert(*i)) {
        out.push(Violation::DuplicateSourceIndex);
    }

    if t.query_id == t.target_id {
        out.push(Violation::SelfPair);
    }
    if t.pair_id != pair_id(&t.query_id, &t.target_id) {
        out.push(Violation::PairIdMismatch);
    }
    if t.distractor_ids.contains(&t.query_id) {
        out.push(Violation::DistractorIsQuery);
    }
    if t.distractor_ids.contains(&t.target_id) {
        out.push(Violation::DistractorIsTarget);
    }
    let mut seen = HashSet::new();
    if !t.distractor_ids.iter().all(|d| seen.insert(d.as_str())) {
        out.push(Violation::DuplicateDistractor);
    }
    if t.distractor_ids.len() > cfg.max_distractors {
        out.push(Violation::TooManyDistractors);
    }
    out.sort();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triplet(text: &str, q: &str, t: &str, distractors: &[&str]) -> CirTriplet {
        CirTriplet {
            pair_id: pair_id(q, t),
            query_id: q.into(),
            target_id: t.into(),
            caption: Caption {
                text: text.into(),
                kind: CaptionKind::Atomic,
                source_indices: vec![0],
                token_count: 8,
            },
            distractor_ids: distractors.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(SimilarityError::DimensionMismatch(1, 2))
        );
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]),
            Err(SimilarityError::ZeroNorm)
        );
        assert_eq!(
            cosine_similarity(&[f64::NAN, 0.0], &[1.0, 2.0]),
            Err(SimilarityError::NonFinite)
        );
    }

    #[test]
    fn forbidden_verb_triplet() {
        let t = triplet("Ensure the bed stays white.", "a", "b", &[]);
        assert_eq!(
            validate_triplet(&t, &ValidationConfig::default()),
            vec![Violation::ForbiddenVerb]
        );
    }

    #[test]
    fn self_pair_triplet() {
        let t = triplet("Add a lamp.", "a", "a", &[]);
        assert_eq!(
            validate_triplet(&t, &ValidationConfig::default()),
            vec![Violation::SelfPair]
        );
    }

    #[test]
    fn well_formed_triplet() {
        let t = triplet("Add a lamp.", "a", "b", &["c", "d", "e"]);
        assert!(validate_triplet(&t, &ValidationConfig::default()).is_empty());
    }

    #[test]
    fn distractor_rules() {
        let t = triplet(
            "Add a lamp.",
            "a",
            "b",
            &["a", "b", "c", "c", "d", "e", "f"],
        );
        let v = validate_triplet(&t, &ValidationConfig::default());
        assert_eq!(
            v,
            vec![
                Violation::DistractorIsQuery,
                Violation::DistractorIsTarget,
                Violation::DuplicateDistractor,
                Violation::TooManyDistractors
            ]
        );
    }

    #[test]
    fn caption_rules() {
        let mut t = triplet("Add a lamp.", "a", "b", &[]);
        t.caption.kind = CaptionKind::Compound2;
        t.caption.token_count = 80;
        t.pair_id = "other".into();
        let v = validate_triplet(&t, &ValidationConfig::default());
        assert_eq!(
            v,
            vec![
                Violation::TokenBudget,
                Violation::KindArity,
                Violation::PairIdMismatch
            ]
        );

        t.caption.source_indices = vec![3, 3];
        t.caption.token_count = 0;
        t.caption.text = "  ".into();
        t.pair_id = pair_id("a", "b");
        let v = validate_triplet(&t, &ValidationConfig::default());
        assert_eq!(
            v,
            vec![
                Violation::EmptyText,
                Violation::ZeroTokenCount,
                Violation::DuplicateSourceIndex
            ]
        );
    }

    #[test]
    fn forbidden_verb_is_whole_word() {
        assert!(contains_forbidden_verb("MAINTAINED walls"));
        assert!(contains_forbidden_verb("keep it, ensuring symmetry"));
        assert!(!contains_forbidden_verb("The insurance poster stays."));
        assert!(!contains_forbidden_verb("maintenance cart"));
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..12).prop_flat_map(|d| {
            (
                prop::collection::vec(-10.0f64..10.0, d),
                prop::collection::vec(-10.0f64..10.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant((a, b) in vec_pair(), c in 0.01f64..100.0) {
            prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            let sb = cosine_similarity(&scaled, &b).unwrap();
            prop_assert!((sb - ab).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn validate_is_pure(text in "[a-zA-Z ]{0,40}", q in "[a-c]", t in "[a-c]") {
            let tr = triplet(&text, &q, &t, &["d"]);
            let cfg = ValidationConfig::default();
            prop_assert_eq!(validate_triplet(&tr, &cfg), validate_triplet(&tr, &cfg));
        }
    }
}
