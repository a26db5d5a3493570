//! Retrieval evaluation and the reference batch-contrastive loss.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingStore;
use crate::model::{cosine_similarity, SimilarityError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("run has no queries")]
    EmptyRun,
    #[error("query {0:?} ranks {1:?} more than once")]
    DuplicateRanked(String, String),
    #[error("query {0:?} has no relevant ids")]
    NoRelevant(String),
    #[error("query {0:?} appears more than once in the run")]
    DuplicateQuery(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedQuery {
    pub query_id: String,
    pub ranking: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub query_id: String,
    pub relevant: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RetrievalRun {
    pub queries: Vec<RankedQuery>,
    pub relevance: HashMap<String, HashSet<String>>,
}

impl RetrievalRun {
    pub fn new(
        queries: Vec<RankedQuery>,
        relevance: Vec<RelevanceRecord>,
    ) -> Result<Self, MetricsError> {
        let mut rel: HashMap<String, HashSet<String>> = HashMap::new();
        for r in relevance {
            rel.entry(r.query_id).or_default().extend(r.relevant);
        }
        let run = Self {
            queries,
            relevance: rel,
        };
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.queries.is_empty() {
            return Err(MetricsError::EmptyRun);
        }
        let mut seen_queries = HashSet::new();
        for q in &self.queries {
            if !seen_queries.insert(q.query_id.as_str()) {
                return Err(MetricsError::DuplicateQuery(q.query_id.clone()));
            }
            if self.relevance.get(&q.query_id).is_none_or(|r| r.is_empty()) {
                return Err(MetricsError::NoRelevant(q.query_id.clone()));
            }
            let mut seen = HashSet::new();
            for id in &q.ranking {
                if !seen.insert(id.as_str()) {
                    return Err(MetricsError::DuplicateRanked(
                        q.query_id.clone(),
                        id.clone(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn relevant(&self, q: &RankedQuery) -> &HashSet<String> {
        &self.relevance[&q.query_id]
    }
}

/// Gallery ids by descending cosine similarity to `query`, ties by id.
pub fn rank_gallery(
    query: &[f64],
    gallery: &EmbeddingStore,
    exclude: &HashSet<String>,
) -> Result<Vec<String>, MetricsError> {
    let mut scored = Vec::with_capacity(gallery.len());
    for r in gallery.records() {
        if exclude.contains(&r.image_id) {
            continue;
        }
        scored.push((cosine_similarity(query, &r.vector)?, r.image_id.as_str()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    Ok(scored.into_iter().map(|(_, id)| id.to_string()).collect())
}

pub fn recall_at_k(run: &RetrievalRun, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    run.validate()?;
    let hits = run
        .queries
        .iter()
        .filter(|q| {
            let rel = run.relevant(q);
            q.ranking.iter().take(k).any(|id| rel.contains(id))
        })
        .count();
    Ok(hits as f64 / run.queries.len() as f64)
}

/// AP@K normalised by `min(K, R)`.
pub fn average_precision_at_k(ranking: &[String], relevant: &HashSet<String>, k: usize) -> f64 {
    if k == 0 || relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().take(k).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / k.min(relevant.len()) as f64
}

pub fn map_at_k(run: &RetrievalRun, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    run.validate()?;
    let total: f64 = run
        .queries
        .iter()
        .map(|q| average_precision_at_k(&q.ranking, run.relevant(q), k))
        .sum();
    Ok(total / run.queries.len() as f64)
}

/// `{"R@K": .., "mAP@K": ..}` for every K.
pub fn report(run: &RetrievalRun, ks: &[usize]) -> Result<BTreeMap<String, f64>, MetricsError> {
    let mut out = BTreeMap::new();
    for &k in ks {
        out.insert(format!("R@{k}"), recall_at_k(run, k)?);
        out.insert(format!("mAP@{k}"), map_at_k(run, k)?);
    }
    Ok(out)
}

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("batch is empty")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0} row {1}")]
    NonFinite(&'static str, usize),
    #[error("{0} row {1} has zero norm")]
    ZeroNorm(&'static str, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `-log softmax` over cross similarities `s_ij`.
    #[default]
    InfoNce,
    /// The bare ratio `exp(s_ii/τ) / Σ_j exp(s_jj/τ)`, no log.
    Literal,
}

#[derive(Debug, Clone)]
pub struct LossBatch {
    pub fused: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Per-row term whose mean is `loss`.
    pub per_row: Vec<f64>,
    /// d loss / d fused, same shape as `fused`.
    pub grad_fused: Vec<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_rows(rows: &[Vec<f64>], name: &'static str, dim: usize) -> Result<Vec<f64>, LossError> {
    let mut norms = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(LossError::Shape(format!(
                "{name} row {i} has dimension {}, expected {dim}",
                r.len()
            )));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(LossError::NonFinite(name, i));
        }
        let n = norm(r);
        if n == 0.0 {
            return Err(LossError::ZeroNorm(name, i));
        }
        norms.push(n);
    }
    Ok(norms)
}

pub fn info_nce_loss(batch: &LossBatch, mode: LossMode) -> Result<LossOutput, LossError> {
    let tau = batch.temperature;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LossError::Temperature(tau));
    }
    let n = batch.fused.len();
    if n == 0 {
        return Err(LossError::Empty);
    }
    if batch.targets.len() != n {
        return Err(LossError::Shape(format!(
            "{n} fused rows vs {} target rows",
            batch.targets.len()
        )));
    }
    let d = batch.fused[0].len();
    let fu_norms = check_rows(&batch.fused, "fused", d)?;
    let tg_norms = check_rows(&batch.targets, "targets", d)?;

    let unit = |rows: &[Vec<f64>], norms: &[f64]| -> Vec<Vec<f64>> {
        rows.iter()
            .zip(norms)
            .map(|(r, n)| r.iter().map(|x| x / n).collect())
            .collect()
    };
    let u = unit(&batch.fused, &fu_norms);
    let v = unit(&batch.targets, &tg_norms);
    let s: Vec<Vec<f64>> = u
        .iter()
        .map(|ui| {
            v.iter()
                .map(|vj| ui.iter().zip(vj).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();

    match mode {
        LossMode::InfoNce => {
            let mut per_row = Vec::with_capacity(n);
            let mut grad = vec![vec![0.0; d]; n];
            for i in 0..n {
                let logits: Vec<f64> = s[i].iter().map(|x| x / tau).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                per_row.push(lse - logits[i]);
                for j in 0..n {
                    let p = (logits[j] - lse).exp();
                    let coef = (p - f64::from(u8::from(i == j))) / (tau * n as f64 * fu_norms[i]);
                    for k in 0..d {
                        grad[i][k] += coef * (v[j][k] - s[i][j] * u[i][k]);
                    }
                }
            }
            let loss = per_row.iter().sum::<f64>() / n as f64;
            Ok(LossOutput {
                loss,
                per_row,
                grad_fused: grad,
            })
        }
        LossMode::Literal => {
            let diag: Vec<f64> = (0..n).map(|i| s[i][i] / tau).collect();
            let max = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = diag.iter().map(|x| (x - max).exp()).sum();
            let per_row: Vec<f64> = diag.iter().map(|x| (x - max).exp() / denom).collect();
            let loss = per_row.iter().sum::<f64>() / n as f64;
            // The row ratios sum to one for any input, so their mean is constant.
            Ok(LossOutput {
                loss,
                per_row,
                grad_fused: vec![vec![0.0; d]; n],
            })
        }
    }
}
