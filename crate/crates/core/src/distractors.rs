use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingStore, StoreError};
use crate::model::{cosine_similarity, ImagePair, DEFAULT_MAX_DISTRACTORS};
use crate::rng::pair_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorRule {
    /// Candidate when its similarity to the query beats the query/target similarity.
    #[default]
    QueryDominance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistractorConfig {
    pub k: usize,
    pub seed: u64,
    pub rule: DistractorRule,
}

impl Default for DistractorConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_MAX_DISTRACTORS,
            seed: 0,
            rule: DistractorRule::QueryDominance,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DistractorError {
    #[error("no embedding for query image {0:?}")]
    MissingQuery(String),
    #[error("no embedding for target image {0:?}")]
    MissingTarget(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// All store ids closer to the query than the target is, in id order.
pub fn candidate_set(
    query_id: &str,
    target_id: &str,
    store: &EmbeddingStore,
) -> Result<Vec<String>, DistractorError> {
    let q = store
        .get(query_id)
        .ok_or_else(|| DistractorError::MissingQuery(query_id.to_string()))?;
    let t = store
        .get(target_id)
        .ok_or_else(|| DistractorError::MissingTarget(target_id.to_string()))?;
    let bar = cosine_similarity(&q.vector, &t.vector).map_err(StoreError::from)?;
    let mut out = Vec::new();
    for r in store.records() {
        if r.image_id == query_id || r.image_id == target_id {
            continue;
        }
        if cosine_similarity(&q.vector, &r.vector).map_err(StoreError::from)? > bar {
            out.push(r.image_id.clone());
        }
    }
    Ok(out)
}

/// Samples `min(k, |C|)` distinct candidates; the draw depends only on the
/// seed, the pair id and the store contents. Output is in id order.
pub fn sample_distractors(
    query_id: &str,
    target_id: &str,
    pair_id: &str,
    store: &EmbeddingStore,
    cfg: &DistractorConfig,
) -> Result<Vec<String>, DistractorError> {
    let candidates = candidate_set(query_id, target_id, store)?;
    let m = cfg.k.min(candidates.len());
    let mut rng = pair_rng(cfg.seed, "distract", pair_id);
    let mut picked = index::sample(&mut rng, candidates.len(), m).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| candidates[i].clone()).collect())
}

pub fn sample_for_pair(
    pair: &ImagePair,
    store: &EmbeddingStore,
    cfg: &DistractorConfig,
) -> Result<Vec<String>, DistractorError> {
    sample_distractors(&pair.query.id, &pair.target.id, &pair.pair_id, store, cfg)
}
