//! Query/target pair mining: exact cosine nearest neighbours with class
//! exclusion, filtered by a perceptual-hash Hamming band.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingStore;
use crate::model::{pair_id, ImagePair, ImageRef};
use crate::phash::{hamming_distance, PerceptualHash, PhashError};

// Query rows evaluated per tile.
const ROW_TILE: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub hash_min: u32,
    pub hash_max: u32,
    pub exclude_same_class: bool,
    pub neighbors_per_image: usize,
    pub dedupe_symmetric: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            hash_min: 25,
            hash_max: 35,
            exclude_same_class: true,
            neighbors_per_image: 1,
            dedupe_symmetric: false,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self, bit_width: u32) -> Result<(), MiningError> {
        if self.hash_min > self.hash_max || self.hash_max > bit_width {
            return Err(MiningError::Config(format!(
                "need 0 <= hash_min ({}) <= hash_max ({}) <= {bit_width}",
                self.hash_min, self.hash_max
            )));
        }
        if self.neighbors_per_image == 0 {
            return Err(MiningError::Config(
                "neighbors_per_image must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no perceptual hash for image {0:?}")]
    MissingHash(String),
    #[error("image {0:?} has an embedding but is not in the corpus")]
    MissingImage(String),
    #[error("invalid mining config: {0}")]
    Config(String),
    #[error(transparent)]
    Hash(#[from] PhashError),
}

/// Mines pairs from `store`. `corpus` supplies paths and class ids; every
/// embedded image must appear in `corpus` and `hashes`.
pub fn mine_pairs(
    store: &EmbeddingStore,
    corpus: &[ImageRef],
    hashes: &HashMap<String, PerceptualHash>,
    cfg: &MiningConfig,
) -> Result<Vec<ImagePair>, MiningError> {
    if store.is_empty() || corpus.is_empty() {
        return Err(MiningError::EmptyCorpus);
    }
    let refs: HashMap<&str, &ImageRef> = corpus.iter().map(|r| (r.id.as_str(), r)).collect();
    let n = store.len();
    let mut row_refs = Vec::with_capacity(n);
    let mut row_hashes = Vec::with_capacity(n);
    for i in 0..n {
        let id = store.id(i);
        row_refs.push(
            *refs
                .get(id)
                .ok_or_else(|| MiningError::MissingImage(id.to_string()))?,
        );
        row_hashes.push(
            *hashes
                .get(id)
                .ok_or_else(|| MiningError::MissingHash(id.to_string()))?,
        );
    }
    cfg.validate(row_hashes[0].bit_width())?;

    let eligible = |q: usize, c: usize| {
        if q == c {
            return false;
        }
        if cfg.exclude_same_class {
            if let (Some(a), Some(b)) = (&row_refs[q].class_id, &row_refs[c].class_id) {
                return a != b;
            }
        }
        true
    };

    let rows: Vec<usize> = (0..n).collect();
    let per_tile: Vec<Result<Vec<ImagePair>, MiningError>> = rows
        .par_chunks(ROW_TILE)
        .map(|tile| {
            let mut out = Vec::new();
            for &q in tile {
                let mut scored: Vec<(f64, usize)> = (0..n)
                    .filter(|&c| eligible(q, c))
                    .map(|c| (store.unit_dot(q, c), c))
                    .collect();
                // Store rows are id-sorted, so index order is id order.
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                for &(sim, t) in scored.iter().take(cfg.neighbors_per_image) {
                    let dist = hamming_distance(&row_hashes[q], &row_hashes[t])?;
                    if dist < cfg.hash_min || dist > cfg.hash_max {
                        continue;
                    }
                    out.push(ImagePair {
                        pair_id: pair_id(store.id(q), store.id(t)),
                        query: row_refs[q].clone(),
                        target: row_refs[t].clone(),
                        emb_similarity: sim,
                        hash_distance: dist,
                    });
                }
            }
            Ok(out)
        })
        .collect();

    let mut pairs = Vec::new();
    for tile in per_tile {
        pairs.extend(tile?);
    }

    if cfg.dedupe_symmetric {
        let keys: BTreeSet<(String, String)> = pairs
            .iter()
            .map(|p| (p.query.id.clone(), p.target.id.clone()))
            .collect();
        pairs.retain(|p| {
            let reverse = (p.target.id.clone(), p.query.id.clone());
            !(keys.contains(&reverse) && p.query.id > p.target.id)
        });
    }
    Ok(pairs)
}
