use std::collections::HashMap;

use thiserror::Error;

use crate::model::{cosine_similarity, EmbeddingRecord, SimilarityError};

#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("embedding store is empty")]
    Empty,
    #[error("record {id:?} has dimension {got}, store dimension is {expected}")]
    Dimension {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error("record {0:?} has zero dimension")]
    ZeroDim(String),
    #[error("record {0:?} has a non-finite component")]
    NonFinite(String),
    #[error("record {0:?} is the zero vector")]
    ZeroNorm(String),
    #[error("duplicate embedding id {0:?}")]
    Duplicate(String),
    #[error("empty embedding id")]
    EmptyId,
    #[error("no embedding for {0:?}")]
    Missing(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

/// Immutable, id-sorted collection of equal-dimension embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    records: Vec<EmbeddingRecord>,
    unit: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    dim: usize,
}

impl EmbeddingStore {
    pub fn new(mut records: Vec<EmbeddingRecord>) -> Result<Self, StoreError> {
        if records.is_empty() {
            return Err(StoreError::Empty);
        }
        records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let dim = records[0].dim();
        let mut index = HashMap::with_capacity(records.len());
        let mut unit = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.image_id.is_empty() {
                return Err(StoreError::EmptyId);
            }
            if r.dim() == 0 {
                return Err(StoreError::ZeroDim(r.image_id.clone()));
            }
            if r.dim() != dim {
                return Err(StoreError::Dimension {
                    id: r.image_id.clone(),
                    got: r.dim(),
                    expected: dim,
                });
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite(r.image_id.clone()));
            }
            let norm = r.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(StoreError::ZeroNorm(r.image_id.clone()));
            }
            unit.push(r.vector.iter().map(|v| v / norm).collect());
            if index.insert(r.image_id.clone(), i).is_some() {
                return Err(StoreError::Duplicate(r.image_id.clone()));
            }
        }
        Ok(Self {
            records,
            unit,
            index,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in ascending id order.
    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.position(id).map(|i| &self.records[i])
    }

    pub fn id(&self, i: usize) -> &str {
        &self.records[i].image_id
    }

    /// Cosine similarity between two stored records.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64, StoreError> {
        let ra = self
            .get(a)
            .ok_or_else(|| StoreError::Missing(a.to_string()))?;
        let rb = self
            .get(b)
            .ok_or_else(|| StoreError::Missing(b.to_string()))?;
        Ok(cosine_similarity(&ra.vector, &rb.vector)?)
    }

    /// Dot product of pre-normalized rows, i.e. the cosine similarity.
    pub(crate) fn unit_dot(&self, i: usize, j: usize) -> f64 {
        dot(&self.unit[i], &self.unit[j])
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}
