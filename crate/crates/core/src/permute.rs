//! Joins atomic difference captions into compound modification texts.

use std::collections::{BTreeSet, HashSet};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{contains_forbidden_verb, Caption, CaptionKind, DEFAULT_TOKEN_LIMIT};
use crate::rng::pair_rng;
use crate::tokenizer::Vocabulary;

/// Consecutive random rejections before switching to exhaustive search.
const RANDOM_ATTEMPTS: usize = 32;
/// Upper bound on combinations examined by one exhaustive search.
const EXHAUSTIVE_CAP: usize = 500_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PermuteConfig {
    pub token_limit: usize,
    pub max_compounds: usize,
    pub allow_sizes: BTreeSet<usize>,
    pub seed: u64,
    /// Whether start/end markers count toward `token_limit`.
    pub count_special_tokens: bool,
}

impl Default for PermuteConfig {
    fn default() -> Self {
        Self {
            token_limit: DEFAULT_TOKEN_LIMIT,
            max_compounds: 60,
            allow_sizes: BTreeSet::from([2, 3]),
            seed: 0,
            count_special_tokens: true,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PermuteConfigError {
    #[error("token_limit must be at least 3, got {0}")]
    TokenLimit(usize),
    #[error("allow_sizes may only contain 2 and 3, got {0:?}")]
    Sizes(BTreeSet<usize>),
}

impl PermuteConfig {
    pub fn validate(&self) -> Result<(), PermuteConfigError> {
        if self.token_limit < 3 {
            return Err(PermuteConfigError::TokenLimit(self.token_limit));
        }
        if self.allow_sizes.iter().any(|s| !(2..=3).contains(s)) {
            return Err(PermuteConfigError::Sizes(self.allow_sizes.clone()));
        }
        Ok(())
    }
}

/// Drops captions that use a forbidden verb form; survivors keep their order.
pub fn filter_captions(captions: &[String]) -> Vec<String> {
    captions
        .iter()
        .filter(|c| !contains_forbidden_verb(c))
        .cloned()
        .collect()
}

fn strip_period(s: &str) -> &str {
    s.strip_suffix('.').unwrap_or(s)
}

fn lowercase_first(s: &str) -> String {
    match s.char_indices().find(|(_, c)| c.is_alphabetic()) {
        Some((i, c)) => {
            let mut out = String::with_capacity(s.len());
            out.push_str(&s[..i]);
            out.extend(c.to_lowercase());
            out.push_str(&s[i + c.len_utf8()..]);
            out
        }
        None => s.to_string(),
    }
}

pub fn join_two(c1: &str, c2: &str) -> String {
    format!("{}, and {}", strip_period(c1), lowercase_first(c2))
}

pub fn join_three(c1: &str, c2: &str, c3: &str) -> String {
    format!(
        "{}, {}, and {}",
        strip_period(c1),
        lowercase_first(strip_period(c2)),
        lowercase_first(c3)
    )
}

/// Joins captions in the given order with the two- or three-part rule.
pub fn join(parts: &[&str]) -> Option<String> {
    match parts {
        [a, b] => Some(join_two(a, b)),
        [a, b, c] => Some(join_three(a, b, c)),
        _ => None,
    }
}

struct Search<'a> {
    captions: &'a [String],
    vocab: &'a Vocabulary,
    cfg: &'a PermuteConfig,
    rejected: HashSet<Vec<usize>>,
}

impl Search<'_> {
    fn text(&self, combo: &[usize]) -> String {
        let parts: Vec<&str> = combo.iter().map(|&i| self.captions[i].as_str()).collect();
        join(&parts).expect("combination sizes are 2 or 3")
    }

    fn try_combo(&mut self, combo: &[usize]) -> Option<Caption> {
        if self.rejected.contains(combo) {
            return None;
        }
        let text = self.text(combo);
        let token_count = self
            .vocab
            .budget_count(&text, self.cfg.count_special_tokens);
        if token_count > self.cfg.token_limit {
            self.rejected.insert(combo.to_vec());
            return None;
        }
        Some(Caption {
            text,
            kind: CaptionKind::for_arity(combo.len()).expect("size 2 or 3"),
            source_indices: combo.to_vec(),
            token_count,
        })
    }

    fn random_combo(&self, pool: &[usize], sizes: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = sizes[rng.random_range(0..sizes.len())];
        let mut combo: Vec<usize> = index::sample(rng, pool.len(), size)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        combo.sort_unstable();
        combo
    }

    // Every untried combination of the feasible sizes that fits the budget.
    fn exhaustive(&mut self, pool: &[usize], sizes: &[usize]) -> Vec<Caption> {
        let mut valid = Vec::new();
        let mut examined = 0usize;
        for &size in sizes {
            let mut idx: Vec<usize> = (0..size).collect();
            loop {
                if examined >= EXHAUSTIVE_CAP {
                    return valid;
                }
                examined += 1;
                let combo: Vec<usize> = idx.iter().map(|&i| pool[i]).collect();
                if let Some(c) = self.try_combo(&combo) {
                    valid.push(c);
                }
                if !next_combination(&mut idx, pool.len()) {
                    break;
                }
            }
        }
        valid
    }
}

// Advances `idx` to the next k-subset of 0..n in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Emits the in-budget atomics, then up to `max_compounds` compounds whose
/// source captions are pairwise disjoint across the whole output.
///
/// `source_indices` refer to positions in `captions`, which should already be
/// filtered. Compound members are joined in ascending index order.
pub fn generate_permutations(
    captions: &[String],
    vocab: &Vocabulary,
    cfg: &PermuteConfig,
    pair_id: &str,
) -> Vec<Caption> {
    let mut out = Vec::new();
    let mut pool = Vec::new();
    for (i, text) in captions.iter().enumerate() {
        if text.trim().is_empty() {
            continue;
        }
        let token_count = vocab.budget_count(text, cfg.count_special_tokens);
        if token_count <= cfg.token_limit {
            out.push(Caption {
                text: text.clone(),
                kind: CaptionKind::Atomic,
                source_indices: vec![i],
                token_count,
            });
            pool.push(i);
        }
    }

    let mut rng = pair_rng(cfg.seed, "permute", pair_id);
    let mut search = Search {
        captions,
        vocab,
        cfg,
        rejected: HashSet::new(),
    };
    let mut compounds = 0;
    let mut failures = 0;
    while compounds < cfg.max_compounds {
        let sizes: Vec<usize> = cfg
            .allow_sizes
            .iter()
            .copied()
            .filter(|&s| s <= pool.len())
            .collect();
        if sizes.is_empty() {
            break;
        }
        let found = if failures < RANDOM_ATTEMPTS {
            let combo = search.random_combo(&pool, &sizes, &mut rng);
            search.try_combo(&combo)
        } else {
            let mut valid = search.exhaustive(&pool, &sizes);
            if valid.is_empty() {
                break;
            }
            Some(valid.swap_remove(rng.random_range(0..valid.len())))
        };
        match found {
            Some(caption) => {
                pool.retain(|i| !caption.source_indices.contains(i));
                out.push(caption);
                compounds += 1;
                failures = 0;
            }
            None => failures += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn filter_examples() {
        assert_eq!(
            filter_captions(&s(&["Add a lamp.", "Maintain the white walls."])),
            s(&["Add a lamp."])
        );
        assert!(filter_captions(&s(&["Ensuring symmetry, move the bed."])).is_empty());
        assert_eq!(
            filter_captions(&s(&["The insurance poster stays."])),
            s(&["The insurance poster stays."])
        );
    }

    #[test]
    fn join_examples() {
        assert_eq!(
            join_two("Add a red ball.", "Remove the lamp."),
            "Add a red ball, and remove the lamp."
        );
        assert_eq!(
            join_two("Add a ball", "Remove it."),
            "Add a ball, and remove it."
        );
        assert_eq!(
            join_two("Move the desk.", "2 pillows appear."),
            "Move the desk, and 2 pillows appear."
        );
        assert_eq!(
            join_three("Add a ball.", "Remove the rug.", "Darken the walls."),
            "Add a ball, remove the rug, and darken the walls."
        );
        assert_eq!(join_three("A.", "B.", "C."), "A, b, and c.");
        assert_ne!(
            join_three("A.", "B.", "C."),
            join_two(&join_two("A.", "B."), "C.")
        );
        assert_eq!(join_two("Wow!", "Really?"), "Wow!, and really?");
        assert_eq!(join_two("Dots..", "X."), "Dots., and x.");
        assert_eq!(join(&["a"]), None);
    }

    #[test]
    fn combinations_enumerate_in_order() {
        let mut idx = vec![0, 1];
        let mut all = vec![idx.clone()];
        while next_combination(&mut idx, 4) {
            all.push(idx.clone());
        }
        assert_eq!(
            all,
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
    }

    #[test]
    fn config_validation() {
        assert!(PermuteConfig::default().validate().is_ok());
        let bad = PermuteConfig {
            token_limit: 2,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(PermuteConfigError::TokenLimit(2)));
        let bad = PermuteConfig {
            allow_sizes: BTreeSet::from([4]),
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(PermuteConfigError::Sizes(_))));
    }
}
